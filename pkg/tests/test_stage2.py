import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import fd_max_rel_error
from uod.domain import ImageRecord
from uod.stage2 import (DomainTrainData, Stage2Config, bce_loss, build_datr, predict, split_validation,
                        train_stage2)
from uod.universal_conv import parameter_tags

TINY = dict(dims=(8, 16, 32, 64), depths=(1, 1, 1, 1), num_heads=2)


def _cfg(**kw):
    return Stage2Config(**{**dict(image_size=64, batch_size=2, epochs=2, lr=1e-3, **TINY), **kw})


def test_defaults():
    cfg = Stage2Config()
    assert (cfg.image_size, cfg.batch_size, cfg.epochs, cfg.lr, cfg.sigma, cfg.alpha) == (576, 8, 300, 1e-4, 3, 10)
    assert cfg.block_variant == "full"


def test_bad_variant():
    with pytest.raises(ValueError):
        Stage2Config(block_variant="xl").validate()


def test_bce_minimum():
    t = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert bce_loss(t.clone(), t).item() < 1e-6


def test_bce_half():
    rng = np.random.default_rng(0)
    t = torch.as_tensor(rng.random((3, 5, 5)))
    assert bce_loss(torch.full_like(t, 0.5), t).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_scalar_oracle():
    p = [[0.2, 0.9], [0.5, 0.01]]
    t = [[0.0, 1.0], [0.3, 0.7]]
    oracle = 0.0
    for i in range(2):
        for j in range(2):
            oracle -= t[i][j] * math.log(p[i][j]) + (1 - t[i][j]) * math.log(1 - p[i][j])
    got = bce_loss(torch.tensor(p, dtype=torch.float64), torch.tensor(t, dtype=torch.float64)).item()
    assert got == pytest.approx(oracle / 4, abs=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_bce_gradient_fd():
    rng = np.random.default_rng(1)
    p = torch.tensor(rng.uniform(0.05, 0.95, (2, 3, 3)), requires_grad=True)
    t = torch.as_tensor(rng.random((2, 3, 3)))
    assert fd_max_rel_error(lambda: bce_loss(p, t), [p]) < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bce_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, t = torch.as_tensor(rng.random((4, 4))), torch.as_tensor(rng.random((4, 4)))
    assert bce_loss(p, t).item() >= 0


def _domains(rng, n_img=6):
    out = []
    for name, n in (("a", 3), ("b", 2)):
        imgs = [rng.random((64, 64, 1)) for _ in range(n_img)]
        labs = [rng.uniform(8, 56, (n, 2)) for _ in range(n_img)]
        out.append(DomainTrainData(name, imgs[:-1], labs[:-1], imgs[-1:], labs[-1:]))
    return out


def test_isolation_one_step():
    torch.manual_seed(0)
    model = build_datr(_cfg(), [3, 2])
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    opt.zero_grad(set_to_none=True)
    out = model(torch.rand(2, 1, 64, 64), 0)
    bce_loss(out, torch.rand_like(out)).backward()
    opt.step()
    after = model.state_dict()
    for name, tag in parameter_tags(model).items():
        if tag == "domain1":
            assert torch.equal(before[name], after[name]), name


def test_training_deterministic_and_history():
    rng = np.random.default_rng(0)
    doms = _domains(rng)
    a, b = train_stage2(_cfg(), doms), train_stage2(_cfg(), doms)
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert [r["epoch"] for r in a.history] == [0, 1, 2]
    assert set(a.history[1]) == {"epoch", "train_loss", "val_loss", "val_mre_a", "val_mre_b"}
    best = min(a.history, key=lambda r: r["val_loss"])
    assert a.best_epoch == best["epoch"]


@pytest.mark.parametrize("variant", ["base", "+D", "+Q", "full"])
def test_variants_train(variant):
    res = train_stage2(_cfg(block_variant=variant, epochs=1), _domains(np.random.default_rng(1), 3))
    assert np.isfinite(res.history[-1]["train_loss"])


def test_missing_labels():
    d = DomainTrainData("a", [np.zeros((64, 64, 1))], [])
    with pytest.raises(ValueError):
        train_stage2(_cfg(), [d])


def test_validation_split_keeps_oneshot():
    ids = [f"x{k}" for k in range(20)]
    val = split_validation(ids, 0.1, np.random.default_rng(0), keep=["x0"])
    assert len(val) == 2 and "x0" not in val


class _Impulse(torch.nn.Module):
    """Stand-in model: one impulse per channel at fixed working coordinates."""

    def __init__(self, points, zero_channel=None):
        super().__init__()
        self.points = points
        self.zero_channel = zero_channel
        self.num_landmarks = [len(points)]

    def forward(self, x, d):
        out = torch.zeros(x.shape[0], len(self.points), *x.shape[-2:])
        for k, (i, j) in enumerate(self.points):
            if k != self.zero_channel:
                out[:, k, i, j] = 1.0
        return out


def test_predict_maps_to_native():
    model = _Impulse([(10, 20), (33, 5)])
    lm, stack, failed = predict(model, _cfg(), np.zeros((192, 192, 1)), 0)
    assert stack.maps.shape == (2, 64, 64)
    assert not failed.any()
    assert np.array_equal(lm.coords, [[30.0, 60.0], [99.0, 15.0]])


def test_predict_flags_empty_channel():
    model = _Impulse([(10, 20), (33, 5), (1, 1)], zero_channel=1)
    lm, _, failed = predict(model, _cfg(), np.zeros((64, 64, 1)), 0)
    assert failed.tolist() == [False, True, False]
    assert np.isfinite(lm.coords[[0, 2]]).all()


def test_predict_unknown_domain():
    with pytest.raises(ValueError):
        predict(_Impulse([(1, 1)]), _cfg(), np.zeros((64, 64, 1)), 3)


def test_predict_deterministic_real_model():
    torch.manual_seed(0)
    model = build_datr(_cfg(), [3]).eval()
    img = ImageRecord("a", np.random.default_rng(0).random((96, 96, 1)), 0)
    a, sa, _ = predict(model, _cfg(), img, 0)
    b, sb, _ = predict(model, _cfg(), img, 0)
    assert np.array_equal(sa.maps, sb.maps)
    assert np.array_equal(a.coords, b.coords, equal_nan=True)
    assert sa.in_unit_range()
