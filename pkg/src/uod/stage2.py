"""Stage II: supervised heatmap regression of the domain-adaptive transformer
on Stage I pseudo labels, and inference back to native-resolution landmarks."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from uod.common import check_finite, images_to_tensor, round_robin_batches, seed_everything
from uod.data import resize_pixels, scale_coords
from uod.datb import DATR, VARIANTS
from uod.domain import ImageRecord, LandmarkSet
from uod.heatmap import HeatmapStack, decode_landmarks, encode_heatmaps

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class Stage2Config:
    image_size: int = 576
    batch_size: int = 8
    epochs: int = 300
    lr: float = 1e-4
    sigma: float = 3.0
    alpha: float = 10.0
    block_variant: str = "full"
    seed: int = 0
    dims: tuple = (32, 64, 128, 256)
    depths: tuple = (2, 2, 2, 2)
    num_heads: int = 4
    window: int = 8
    in_channels: int = 1
    val_fraction: float = 0.1
    threshold_ratio: float = 0.5

    def validate(self) -> None:
        if self.block_variant not in VARIANTS:
            raise ValueError(f"block_variant must be one of {VARIANTS}")
        for name in ("image_size", "batch_size", "epochs", "lr", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.alpha > 1:
            raise ValueError("alpha must be > 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"], d["depths"] = list(self.dims), list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Stage2Config":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("dims", "depths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy with the prediction clamped to [eps, 1 - eps]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def build_datr(cfg: Stage2Config, num_landmarks: Sequence[int]) -> DATR:
    return DATR(num_landmarks, cfg.in_channels, cfg.dims, cfg.depths, cfg.num_heads, cfg.window, cfg.block_variant)


@dataclass
class DomainTrainData:
    """One domain's Stage II inputs at the working resolution."""

    name: str
    images: list  # H x W x C arrays
    labels: list  # N x 2 arrays (pseudo labels, or the one-shot annotation)
    val_images: list = field(default_factory=list)
    val_labels: list = field(default_factory=list)


def split_validation(image_ids: Sequence[str], fraction: float, rng: np.random.Generator, keep=()) -> set:
    """Pick ``fraction`` of the ids (at least one when possible) for validation."""
    pool = [i for i in image_ids if i not in set(keep)]
    k = int(round(len(pool) * fraction))
    if fraction > 0 and len(pool) > 1:
        k = max(k, 1)
    return set(rng.choice(pool, size=k, replace=False).tolist()) if k else set()


def _targets(labels, shape, cfg: Stage2Config) -> torch.Tensor:
    return torch.as_tensor(np.stack([encode_heatmaps(l, shape, cfg.sigma, cfg.alpha).maps for l in labels]),
                           dtype=torch.float32)


@dataclass
class Stage2Result:
    model: DATR
    config: Stage2Config
    history: list  # one dict per epoch
    best_epoch: int
    domain_names: list
    seconds: float = 0.0


@torch.no_grad()
def evaluate_split(model: DATR, images, labels, d: int, cfg: Stage2Config, targets=None):
    """(mean BCE, MRE in working px) of ``model`` on one domain's images."""
    if not images:
        return float("nan"), float("nan")
    model.eval()
    shape = images[0].shape[:2]
    losses, errs = [], []
    for s in range(0, len(images), 16):
        x = images_to_tensor(images[s:s + 16], cfg.in_channels)
        pred = model(x, d)
        t = targets[s:s + 16] if targets is not None else _targets(labels[s:s + 16], shape, cfg)
        losses.append(float(bce_loss(pred, t)) * len(x))
        for k, p in enumerate(pred.double().numpy()):
            coords, failed = decode_landmarks(p, cfg.threshold_ratio)
            c = coords.coords.copy()
            c[failed] = ((shape[0] - 1) / 2, (shape[1] - 1) / 2)
            errs.append(np.linalg.norm(c - labels[s + k], axis=1))
    return sum(losses) / len(images), float(np.mean(np.concatenate(errs)))


def train_stage2(cfg: Stage2Config, domains: Sequence[DomainTrainData], progress=None) -> Stage2Result:
    """Round-robin domain-homogeneous batches, BCE on encoded pseudo-label
    heatmaps; the weights with the lowest validation loss are kept."""
    cfg.validate()
    for dom in domains:
        if not dom.images or len(dom.images) != len(dom.labels):
            raise ValueError(f"domain {dom.name}: missing pseudo labels")
    t0 = time.time()
    rng = seed_everything(cfg.seed)
    model = build_datr(cfg, [len(dom.labels[0]) for dom in domains])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    shape = domains[0].images[0].shape[:2]
    train_t = [_targets(dom.labels, shape, cfg) for dom in domains]
    val_t = [_targets(dom.val_labels, shape, cfg) if dom.val_labels else None for dom in domains]
    history = []

    def validate(epoch, train_loss):
        row = {"epoch": epoch, "train_loss": train_loss}
        vl = []
        for d, dom in enumerate(domains):
            loss, err = evaluate_split(model, dom.val_images, dom.val_labels, d, cfg, val_t[d])
            row[f"val_mre_{dom.name}"] = err
            if dom.val_images:
                vl.append(loss)
        row["val_loss"] = float(np.mean(vl)) if vl else float("nan")
        history.append(row)
        if progress:
            progress(row)
        log.info("stage2 %s", row)
        return row["val_loss"]

    best_loss = validate(0, float("nan"))
    best_state, best_epoch = copy.deepcopy(model.state_dict()), 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        for d, idx in round_robin_batches([len(dom.images) for dom in domains], cfg.batch_size, rng):
            x = images_to_tensor([domains[d].images[i] for i in idx], cfg.in_channels)
            loss = bce_loss(model(x, d), train_t[d][torch.as_tensor(idx)])
            check_finite(loss, f"stage2 epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        vloss = validate(epoch, float(np.mean(losses)))
        if not np.isfinite(best_loss) or vloss < best_loss:
            best_loss, best_epoch = vloss, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return Stage2Result(model, cfg, history, best_epoch, [dom.name for dom in domains], time.time() - t0)


@torch.no_grad()
def predict(model: DATR, cfg: Stage2Config, image, d: int):
    """Landmarks in native pixels, the working-size heatmaps and a failure mask.

    ``image`` is an ImageRecord or an H x W x C array at any size.
    """
    if not 0 <= d < len(model.num_landmarks):
        raise ValueError(f"domain {d} not in checkpoint registry")
    pixels = image.pixels if isinstance(image, ImageRecord) else np.asarray(image)
    native = pixels.shape[:2]
    size = (cfg.image_size, cfg.image_size)
    work = resize_pixels(pixels, size)
    model.eval()
    out = model(images_to_tensor([work], cfg.in_channels), d)[0].double().numpy()
    stack = HeatmapStack(np.clip(out, 0.0, 1.0), d, cfg.sigma, cfg.alpha)
    coords, failed = decode_landmarks(stack, cfg.threshold_ratio)
    native_coords = scale_coords(coords.coords, size, native)
    return LandmarkSet(native_coords, d), stack, failed
