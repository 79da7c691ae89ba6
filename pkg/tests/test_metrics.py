import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uod.domain import CALIBRATED, PIXEL_ONLY, DomainSpec
from uod.metrics import (DEFAULT_THRESHOLDS_MM, EvalReport, MetricError, UnitError, evaluate_domain, mre, sdr,
                         wrist_calibration)


def _oracle_mre(p, g, s):
    tot = 0.0
    for (a, b), (c, d) in zip(p, g):
        tot += math.sqrt((a - c) ** 2 + (b - d) ** 2) * s
    return tot / len(p)


def _oracle_sdr(p, g, t, s):
    hit = sum(1 for (a, b), (c, d) in zip(p, g) if math.sqrt((a - c) ** 2 + (b - d) ** 2) * s <= t)
    return 100.0 * hit / len(p)


def test_zero_error():
    g = np.random.default_rng(0).uniform(0, 50, (19, 2))
    assert mre(g, g) == 0.0
    assert sdr(g, g, DEFAULT_THRESHOLDS_MM) == [100.0] * 4


def test_345():
    assert mre([(3.0, 4.0)], [(0.0, 0.0)]) == 5.0


def test_strict_le_threshold():
    assert sdr([(3.0, 4.0)], [(0.0, 0.0)], [4.0]) == [0.0]
    assert sdr([(3.0, 4.0)], [(0.0, 0.0)], [5.0]) == [100.0]


def test_19_landmark_fixture():
    rng = np.random.default_rng(3)
    p, g = rng.uniform(0, 200, (19, 2)), rng.uniform(0, 200, (19, 2))
    assert mre(p, g, 0.1) == pytest.approx(_oracle_mre(p, g, 0.1), abs=1e-9)


def test_mixed_sdr_fixture():
    rng = np.random.default_rng(4)
    g = rng.uniform(0, 100, (40, 2))
    p = g + rng.normal(0, 2.0, g.shape)
    got = sdr(p, g, DEFAULT_THRESHOLDS_MM)
    assert got == [pytest.approx(_oracle_sdr(p, g, t, 1.0), abs=1e-9) for t in DEFAULT_THRESHOLDS_MM]


def test_wrist_rule():
    assert wrist_calibration((0, 0), (30, 40)) == 1.0
    s = wrist_calibration((0, 0), (0, 100))
    assert s == 0.5
    assert mre([(10.0, 0.0)], [(0.0, 0.0)], s) == 5.0
    assert wrist_calibration((12, 34), (45, 67)) == pytest.approx(50 / math.hypot(33, 33), abs=1e-12)
    with pytest.raises(MetricError):
        wrist_calibration((1, 1), (1, 1))


def test_thresholds_must_increase():
    with pytest.raises(MetricError):
        sdr([(0, 0)], [(0, 0)], [3, 2])


def test_unit_discipline():
    spec = DomainSpec("toy", 2, (8, 8), pixel_spacing=PIXEL_ONLY)
    p = [np.zeros((2, 2))]
    with pytest.raises(UnitError):
        evaluate_domain(p, p, spec, unit="mm")
    assert evaluate_domain(p, p, spec, unit="px").shape == (1, 2)


def test_calibrated_domain_uses_wrist_pair():
    spec = DomainSpec("hand", 3, (64, 64), pixel_spacing=CALIBRATED, calibration=(0, 1))
    g = np.array([[0.0, 0.0], [0.0, 100.0], [50.0, 50.0]])
    p = g + np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0]])
    errs = evaluate_domain([p], [g], spec, unit="mm")
    assert errs[0].tolist() == [0.0, 0.0, 5.0]


def test_report_table_and_json():
    rep = EvalReport("px", [1.0, 2.0])
    rep.add_domain("a", np.array([[0.5, 1.5], [2.5, 0.0]]))
    d = rep.to_dict()["domains"]["a"]
    assert d["mre"] == pytest.approx(1.125)
    assert d["sdr"] == {"1": 50.0, "2": 75.0}
    assert "a" in rep.to_table()


pts = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-100, 100))


@settings(max_examples=60, deadline=None)
@given(pts, st.floats(0.01, 2.0), st.data())
def test_oracle_agreement(g, spacing, data):
    p = g + data.draw(arrays(np.float64, g.shape, elements=st.floats(-10, 10)))
    assert mre(p, g, spacing) == pytest.approx(_oracle_mre(p, g, spacing), abs=1e-9)
    ts = [0.5, 1.0, 2.0, 4.0, 8.0]
    got = sdr(p, g, ts, spacing)
    assert got == [pytest.approx(_oracle_sdr(p, g, t, spacing), abs=1e-9) for t in ts]
    assert all(a <= b for a, b in zip(got, got[1:]))
    assert sdr(p, g, [1e9], spacing) == [100.0]


@settings(max_examples=60, deadline=None)
@given(pts, st.floats(-50, 50), st.floats(-50, 50), st.data())
def test_translation_invariance(g, di, dj, data):
    p = g + data.draw(arrays(np.float64, g.shape, elements=st.floats(-10, 10)))
    t = np.array([di, dj])
    assert mre(p + t, g + t) == pytest.approx(mre(p, g), abs=1e-9)
