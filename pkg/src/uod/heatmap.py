"""Landmark <-> heatmap conversion.

Encoding is a truncated Gaussian followed by exponential weighting that is
renormalized so the background is 0 and the peak is 1. Decoding thresholds
each map relative to its maximum, keeps the 4-connected component with the
largest summed response and returns its response-weighted centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from uod.domain import LandmarkSet

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class HeatmapError(ValueError):
    pass


@dataclass
class HeatmapStack:
    maps: np.ndarray  # N x H x W, values in [0, 1]
    domain_id: int
    sigma: float
    alpha: float

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3:
            raise HeatmapError("maps must be N x H x W")
        if not self.sigma > 0:
            raise HeatmapError("sigma must be positive")
        if not self.alpha > 1:
            raise HeatmapError("alpha must be > 1")

    def __len__(self) -> int:
        return self.maps.shape[0]

    def in_unit_range(self) -> bool:
        return bool(np.all(self.maps >= 0.0) and np.all(self.maps <= 1.0))


def gaussian_peak(sigma: float) -> float:
    """Analytic maximum of the truncated Gaussian, 1 / (sqrt(2 pi) sigma)."""
    return 1.0 / (math.sqrt(2.0 * math.pi) * sigma)


def encode_gaussian(landmarks, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Raw truncated-Gaussian maps, one per landmark, shape ``N x H x W``."""
    if not sigma > 0:
        raise HeatmapError("sigma must be positive")
    coords = landmarks.coords if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, float).reshape(-1, 2)
    h, w = int(shape[0]), int(shape[1])
    if len(coords) and (
        np.any(coords[:, 0] < 0) or np.any(coords[:, 0] >= h) or np.any(coords[:, 1] < 0) or np.any(coords[:, 1] >= w)
    ):
        raise HeatmapError(f"landmark outside image of shape {(h, w)}")
    ii = np.arange(h, dtype=np.float64)[None, :, None]
    jj = np.arange(w, dtype=np.float64)[None, None, :]
    d2 = (ii - coords[:, 0, None, None]) ** 2 + (jj - coords[:, 1, None, None]) ** 2
    raw = gaussian_peak(sigma) * np.exp(-d2 / (2.0 * sigma**2))
    raw[d2 > sigma**2] = 0.0
    return raw


def exponentiate(raw: np.ndarray, alpha: float, sigma: float, domain_id: int = 0) -> HeatmapStack:
    """Exponential weighting ``(alpha**raw - 1) / (alpha**m - 1)`` with m the analytic peak."""
    if not alpha > 1:
        raise HeatmapError("alpha must be > 1")
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise HeatmapError("raw heatmap values must be non-negative")
    log_a = math.log(alpha)
    m = gaussian_peak(sigma)
    maps = np.expm1(raw * log_a) / math.expm1(m * log_a)
    return HeatmapStack(np.clip(maps, 0.0, 1.0), domain_id, sigma, alpha)


def encode_heatmaps(landmarks, shape, sigma: float = 3.0, alpha: float = 10.0, domain_id=None) -> HeatmapStack:
    if domain_id is None:
        domain_id = landmarks.domain_id if isinstance(landmarks, LandmarkSet) else 0
    return exponentiate(encode_gaussian(landmarks, shape, sigma), alpha, sigma, domain_id)


def _best_component(response: np.ndarray, threshold_ratio: float):
    peak = response.max()
    mask = response >= threshold_ratio * peak
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n == 1:
        return labels == 1
    idx = np.arange(1, n + 1)
    sums = ndimage.sum_labels(response, labels, idx)
    counts = ndimage.sum_labels(np.ones_like(response), labels, idx)
    flat = labels.ravel()
    order = np.arange(flat.size)
    seeds = ndimage.minimum(order.reshape(labels.shape), labels, idx)
    # largest summed response, then largest pixel count, then earliest seed
    best = min(range(n), key=lambda k: (-sums[k], -counts[k], seeds[k]))
    return labels == idx[best]


def decode_map(response: np.ndarray, threshold_ratio: float = 0.5):
    """Centroid ``(row, col)`` of the dominant component, or ``None`` for a flat map."""
    response = np.asarray(response, dtype=np.float64)
    if not 0 < threshold_ratio < 1:
        raise HeatmapError("threshold_ratio must lie in (0, 1)")
    if not np.all(np.isfinite(response)) or response.max() <= 0:
        return None
    comp = _best_component(response, threshold_ratio)
    wts = np.where(comp, response, 0.0)
    total = wts.sum()
    rows, cols = np.indices(response.shape)
    return float((rows * wts).sum() / total), float((cols * wts).sum() / total)


def decode_landmarks(stack, threshold_ratio: float = 0.5):
    """Decode every map of a stack.

    Returns ``(LandmarkSet, failed)`` where ``failed`` is a boolean mask marking
    all-zero maps; their coordinates are NaN rather than a guess.
    """
    maps = stack.maps if isinstance(stack, HeatmapStack) else np.asarray(stack)
    domain_id = stack.domain_id if isinstance(stack, HeatmapStack) else 0
    if maps.ndim != 3 or maps.shape[0] == 0:
        raise HeatmapError("stack must be a non-empty N x H x W array")
    coords = np.full((maps.shape[0], 2), np.nan)
    failed = np.zeros(maps.shape[0], dtype=bool)
    for n, m in enumerate(maps):
        c = decode_map(m, threshold_ratio)
        if c is None:
            failed[n] = True
        else:
            coords[n] = c
    return LandmarkSet(coords, domain_id), failed


def roundtrip_error(landmarks, shape, sigma=3.0, alpha=10.0, threshold_ratio=0.5) -> np.ndarray:
    """Per-landmark pixel error of decode(exponentiate(encode(L)))."""
    coords = landmarks.coords if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, float).reshape(-1, 2)
    stack = exponentiate(encode_gaussian(coords, shape, sigma), alpha, sigma)
    decoded, failed = decode_landmarks(stack, threshold_ratio)
    if failed.any():
        raise HeatmapError("round trip produced an empty map")
    return np.linalg.norm(decoded.coords - coords, axis=1)
