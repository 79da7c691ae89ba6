"""Mean radial error, successful detection rate and physical calibration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from uod.domain import CALIBRATED, PIXEL_ONLY, DomainSpec, LandmarkSet

WRIST_DISTANCE_MM = 50.0
DEFAULT_THRESHOLDS_MM = (2.0, 2.5, 3.0, 4.0)


class MetricError(ValueError):
    pass


class UnitError(MetricError):
    """Thresholds and distances were given in incompatible units."""


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, LandmarkSet) else np.asarray(x, dtype=np.float64).reshape(-1, 2)


def radial_errors(pred, gt, spacing: float = 1.0) -> np.ndarray:
    p, g = _coords(pred), _coords(gt)
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: {len(p)} predicted vs {len(g)} ground truth")
    if not spacing > 0:
        raise MetricError("spacing must be positive")
    return np.sqrt(((p - g) ** 2).sum(axis=1)) * spacing


def mre(pred, gt, spacing: float = 1.0) -> float:
    return float(np.mean(radial_errors(pred, gt, spacing)))


def sdr(pred, gt, thresholds: Sequence[float], spacing: float = 1.0) -> list[float]:
    """Percentage of landmarks whose radial error is <= each threshold."""
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or np.any(np.diff(t) <= 0):
        raise MetricError("thresholds must be strictly increasing")
    err = radial_errors(pred, gt, spacing)
    return [100.0 * float(np.mean(err <= ti)) for ti in t]


def wrist_calibration(p, q) -> float:
    """mm-per-pixel spacing given the two wrist endpoints, assumed 50 mm apart."""
    dist = float(np.hypot(*(np.asarray(p, float) - np.asarray(q, float))))
    if dist == 0:
        raise MetricError("wrist endpoints coincide")
    return WRIST_DISTANCE_MM / dist


def image_spacing(spec: DomainSpec, gt) -> Optional[float]:
    """Spacing for one image, or None when the domain only has pixel units."""
    if spec.pixel_spacing == CALIBRATED:
        p, q = spec.calibration
        g = _coords(gt)
        return wrist_calibration(g[p], g[q])
    if spec.pixel_spacing == PIXEL_ONLY:
        return None
    return float(spec.pixel_spacing)


@dataclass
class EvalReport:
    unit: str
    thresholds: list[float]
    domains: dict = field(default_factory=dict)

    def add_domain(self, name: str, errors: np.ndarray):
        """``errors`` is images x landmarks of radial errors in ``self.unit``."""
        errors = np.asarray(errors, dtype=np.float64)
        flat = errors.ravel()
        self.domains[name] = {
            "mre": float(flat.mean()),
            "mre_std": float(flat.std()),
            "sdr": {f"{t:g}": 100.0 * float(np.mean(flat <= t)) for t in self.thresholds},
            "per_landmark_mre": [float(v) for v in errors.mean(axis=0)],
            "num_images": int(errors.shape[0]),
        }

    def to_dict(self) -> dict:
        return {"unit": self.unit, "thresholds": list(self.thresholds), "domains": self.domains}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        head = ["domain", f"MRE({self.unit})"] + [f"SDR<={t:g}{self.unit}" for t in self.thresholds]
        rows = [head]
        for name, r in self.domains.items():
            rows.append([name, f"{r['mre']:.3f}"] + [f"{r['sdr'][f'{t:g}']:.2f}" for t in self.thresholds])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def evaluate_domain(preds, gts, spec: DomainSpec, thresholds=DEFAULT_THRESHOLDS_MM, unit: str = "mm"):
    """Radial errors (images x landmarks) for one domain in the requested unit.

    ``unit="mm"`` needs a physical spacing; pixel-only domains raise UnitError.
    """
    if unit not in ("mm", "px"):
        raise UnitError(f"unknown unit {unit!r}")
    rows = []
    for p, g in zip(preds, gts):
        spacing = 1.0
        if unit == "mm":
            spacing = image_spacing(spec, g)
            if spacing is None:
                raise UnitError(f"domain {spec.name} has no physical spacing for mm thresholds")
        rows.append(radial_errors(p, g, spacing))
    return np.stack(rows) if rows else np.zeros((0, spec.num_landmarks))
