"""Static figures: landmark overlays and the one-shot robustness sweep plot."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PRED_COLOR = "red"
GT_COLOR = "lime"


def overlay(pixels: np.ndarray, pred, gt=None, path=None, mre: Optional[float] = None, unit: str = "px",
            title: str = ""):
    """Draw predictions (red) and ground truth (green) over the image.

    Coordinates are (row, col). Returns the figure; saves and closes it when
    ``path`` is given.
    """
    img = np.asarray(pixels)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    h, w = img.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4 * h / w), dpi=100)
    ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    if gt is not None:
        gt = np.asarray(gt, dtype=float).reshape(-1, 2)
        for p, g in zip(pred, gt):
            if np.all(np.isfinite(p)):
                ax.plot([p[1], g[1]], [p[0], g[0]], color="yellow", lw=0.6, alpha=0.7)
        ax.scatter(gt[:, 1], gt[:, 0], s=14, c=GT_COLOR, label="ground truth", zorder=3)
    ok = np.all(np.isfinite(pred), axis=1)
    ax.scatter(pred[ok, 1], pred[ok, 0], s=14, c=PRED_COLOR, marker="x", label="prediction", zorder=4)
    if mre is not None:
        ax.text(0.02, 0.98, f"MRE {mre:.2f} {unit}", transform=ax.transAxes, va="top", ha="left",
                color="white", fontsize=8, bbox=dict(facecolor="black", alpha=0.6, pad=2, lw=0))
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.axis("off")
    fig.tight_layout(pad=0.1)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return fig


def sweep_figure(rows: Sequence[dict], path, unit: str = "px"):
    """Per-candidate MRE for each mode, with the max - min spread in the legend.

    ``rows`` carry ``mode``, ``candidate`` and ``mre`` (and optionally ``seed``;
    repeated seeds are averaged).
    """
    modes = sorted({r["mode"] for r in rows}, key=lambda m: (m != "single", m))
    cands = list(dict.fromkeys(r["candidate"] for r in rows))
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    x = np.arange(len(cands))
    for k, mode in enumerate(modes):
        vals = []
        for c in cands:
            v = [r["mre"] for r in rows if r["mode"] == mode and r["candidate"] == c]
            vals.append(np.mean(v) if v else np.nan)
        vals = np.array(vals)
        spread = np.nanmax(vals) - np.nanmin(vals)
        ax.plot(x, vals, marker="o", label=f"{mode} (spread {spread:.2f})")
    ax.set_xticks(x, cands, rotation=30, ha="right", fontsize=7)
    ax.set_xlabel("one-shot candidate")
    ax.set_ylabel(f"MRE ({unit})")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
