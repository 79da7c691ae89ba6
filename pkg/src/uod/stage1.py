"""Stage I: self-supervised patch matching and one-shot pseudo-labelling.

A random half-size patch is cropped around a random target point and
augmented. Both the image and the patch go through the same siamese network;
at every scale the patch feature at the mapped target is compared by cosine
similarity with every image location, a softmax turns the similarities into a
probability map, and cross-entropy against the target cell is minimised.

Cell convention: pixel ``p`` (real-valued, pixel centres at integers) falls
in cell ``floor((p + 0.5) / stride)`` of a stride-``s`` grid.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from scipy import ndimage

from uod.common import check_finite, images_to_tensor, round_robin_batches, seed_everything
from uod.domain import ImageRecord, LandmarkSet
from uod.universal_conv import MultiScaleFeatures, SiameseNet

log = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    image_size: int = 384
    batch_size: int = 8
    epochs: int = 1000
    lr: float = 1e-5
    seed: int = 0
    channels: tuple = (16, 32, 64, 128, 256)
    embed_dim: int = 32
    in_channels: int = 1
    augment: bool = True
    temperature: float = 1.0
    points_per_patch: int = 1
    frozen_norm_epochs: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------- patches

@dataclass
class Augmentation:
    """Affine ``x' = A (x - c) + c + t`` about the patch centre, then gamma."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    gamma: float = 1.0

    @property
    def is_identity(self) -> bool:
        return bool(np.allclose(self.matrix, np.eye(2)) and not np.any(self.translation) and self.gamma == 1.0)

    def map_point(self, p, shape) -> np.ndarray:
        c = (np.asarray(shape[:2], dtype=np.float64) - 1) / 2
        return self.matrix @ (np.asarray(p, dtype=np.float64) - c) + c + self.translation

    def apply(self, patch: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return patch.copy()
        out = patch
        if not (np.allclose(self.matrix, np.eye(2)) and not np.any(self.translation)):
            c = (np.asarray(patch.shape[:2], dtype=np.float64) - 1) / 2
            inv = np.linalg.inv(self.matrix)
            offset = c - inv @ (c + self.translation)
            out = np.stack(
                [ndimage.affine_transform(patch[:, :, k], inv, offset=offset, order=1, mode="nearest")
                 for k in range(patch.shape[2])], axis=-1)
        if self.gamma != 1.0:
            out = np.clip(out, 0.0, 1.0) ** self.gamma
        return out


def random_augmentation(rng: np.random.Generator, patch_shape, rotation_deg=10.0, scale=(0.9, 1.1),
                        translate=0.05, gamma=(0.8, 1.25)) -> Augmentation:
    th = math.radians(rng.uniform(-rotation_deg, rotation_deg))
    s = rng.uniform(*scale)
    mat = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    t = rng.uniform(-translate, translate, 2) * np.asarray(patch_shape[:2], dtype=np.float64)
    g = math.exp(rng.uniform(math.log(gamma[0]), math.log(gamma[1])))
    return Augmentation(mat, t, g)


@dataclass
class PatchSample:
    patch: np.ndarray  # h x w x C
    point: np.ndarray  # P in full-image px
    mapped_point: np.ndarray  # P_p in augmented-patch px
    origin: np.ndarray  # crop origin (row, col)
    augmentation: Augmentation
    extra_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    extra_mapped: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def all_points(self) -> np.ndarray:
        return np.vstack([self.point[None], self.extra_points])

    @property
    def all_mapped(self) -> np.ndarray:
        return np.vstack([self.mapped_point[None], self.extra_mapped])


def sample_patch(image: np.ndarray, rng: np.random.Generator, augment: bool = True, point=None,
                 max_tries: int = 20, extra: int = 0) -> PatchSample:
    """Crop a half-size patch containing a random target point and augment it.

    ``extra`` further targets are drawn inside the same crop; they share the
    augmentation and are kept only if they stay inside the augmented patch.
    """
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise ValueError("image smaller than 2 x 2")
    ph, pw = h // 2, w // 2
    if point is None:
        point = np.array([rng.integers(0, h), rng.integers(0, w)], dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    pi, pj = int(round(point[0])), int(round(point[1]))
    oi = int(rng.integers(max(0, pi - ph + 1), min(pi, h - ph) + 1))
    oj = int(rng.integers(max(0, pj - pw + 1), min(pj, w - pw) + 1))
    origin = np.array([oi, oj], dtype=np.float64)
    crop = image[oi:oi + ph, oj:oj + pw]
    local = point - origin
    aug = Augmentation()
    if augment:
        for _ in range(max_tries):
            cand = random_augmentation(rng, crop.shape)
            q = cand.map_point(local, crop.shape)
            if 0 <= q[0] <= ph - 1 and 0 <= q[1] <= pw - 1:
                aug = cand
                break
    sample = PatchSample(aug.apply(crop), point, aug.map_point(local, crop.shape), origin, aug)
    if extra:
        cand = np.stack([rng.integers(0, ph, extra * 2), rng.integers(0, pw, extra * 2)], axis=1).astype(float)
        mapped = np.array([aug.map_point(c, crop.shape) for c in cand])
        ok = (mapped[:, 0] >= 0) & (mapped[:, 0] <= ph - 1) & (mapped[:, 1] >= 0) & (mapped[:, 1] <= pw - 1)
        sample.extra_points = (cand[ok] + origin)[:extra]
        sample.extra_mapped = mapped[ok][:extra]
    return sample


# ---------------------------------------------------------------- matching

def cell_index(points: torch.Tensor, stride: int, size) -> torch.Tensor:
    """Grid cells (B x 2, long) containing real-valued pixel coordinates."""
    idx = torch.floor((points + 0.5) / stride).long()
    lim = torch.tensor([size[0] - 1, size[1] - 1], device=points.device)
    if (idx < 0).any() or (idx > lim).any():
        raise ValueError("query location outside feature grid")
    return idx


def _as_points(points, batch: int) -> torch.Tensor:
    """Points as a B x K x 2 float64 tensor (K queries per batch item)."""
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64))
    return pts.reshape(batch, -1, 2)


def similarity_logits(img_feats: MultiScaleFeatures, patch_feats: MultiScaleFeatures, mapped_points) -> list:
    """Per-scale cosine similarity maps, each B x h x w (or B x K x h x w for
    K query points per item)."""
    b = patch_feats.scales[0].shape[0]
    pts = _as_points(mapped_points, b)
    out = []
    for fi, fp, s in zip(img_feats.scales, patch_feats.scales, img_feats.strides):
        idx = cell_index(pts.reshape(-1, 2), s, fp.shape[-2:]).reshape(b, -1, 2)
        bi = torch.arange(b)[:, None].expand(-1, idx.shape[1])
        q = F.normalize(fp[bi, :, idx[..., 0], idx[..., 1]], dim=-1)  # B x K x C
        k = F.normalize(fi, dim=1)
        cos = torch.einsum("bkc,bchw->bkhw", q, k)
        out.append(cos[:, 0] if np.ndim(mapped_points) <= 2 else cos)
    return out


def similarity_maps(img_feats: MultiScaleFeatures, patch_feats: MultiScaleFeatures, mapped_points,
                    temperature: float = 1.0) -> list:
    """Softmax over all image locations of the per-scale cosine similarity."""
    maps = []
    for cos in similarity_logits(img_feats, patch_feats, mapped_points):
        flat = cos.reshape(*cos.shape[:-2], -1)
        maps.append(F.softmax(flat / temperature, dim=-1).reshape(cos.shape))
    return maps


def matching_loss(maps: Sequence[torch.Tensor], points, strides: Sequence[int]) -> torch.Tensor:
    """Sum over scales of the mean cross-entropy against the one-hot cell of P.

    Maps are ``h x w``, ``B x h x w`` or ``B x K x h x w`` with matching points.
    """
    total = 0.0
    for m, s in zip(maps, strides):
        h, w = m.shape[-2:]
        flat = m.reshape(-1, h, w)
        if not (flat.reshape(flat.shape[0], -1).sum(dim=1) > 0).all():
            raise ValueError("degenerate (all-zero) probability map")
        pts = torch.as_tensor(np.asarray(points, dtype=np.float64)).reshape(-1, 2)
        if len(pts) != len(flat):
            raise ValueError(f"{len(pts)} target points for {len(flat)} maps")
        idx = cell_index(pts, s, (h, w))
        total = total + (-torch.log(flat[torch.arange(len(flat)), idx[:, 0], idx[:, 1]])).mean()
    return total


# ---------------------------------------------------------------- training

@dataclass
class Stage1Result:
    model: SiameseNet
    config: Stage1Config
    loss_curve: list
    domain_names: list
    seconds: float = 0.0


def build_siamese(cfg: Stage1Config, num_domains: int) -> SiameseNet:
    return SiameseNet(num_domains, cfg.in_channels, cfg.channels, cfg.embed_dim)


def _batch_tensors(samples: Sequence[PatchSample], images, channels):
    return images_to_tensor(images, channels), images_to_tensor([s.patch for s in samples], channels)


def stage1_step(model: SiameseNet, images: Sequence[np.ndarray], d: int, rng: np.random.Generator,
                cfg: Stage1Config) -> torch.Tensor:
    k = cfg.points_per_patch
    samples = []
    for img in images:
        s = sample_patch(img, rng, cfg.augment, extra=k - 1)
        while len(s.extra_points) < k - 1:  # top up so every item has k targets
            s = sample_patch(img, rng, cfg.augment, extra=k - 1)
        samples.append(s)
    x, xp = _batch_tensors(samples, images, cfg.in_channels)
    fi, fp = model(x, d), model(xp, d)
    maps = similarity_maps(fi, fp, np.stack([s.all_mapped for s in samples]), cfg.temperature)
    return matching_loss(maps, np.stack([s.all_points for s in samples]), fi.strides)


def norm_layers(model: nn.Module) -> list:
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@torch.no_grad()
def recalibrate_norm(model: SiameseNet, datasets, cfg: Stage1Config, rng: np.random.Generator) -> None:
    """Re-estimate every per-domain norm statistic as the exact average over one
    pass of images and patches (instead of the running exponential average)."""
    layers = norm_layers(model)
    momenta = [bn.momentum for bn in layers]
    for bn in layers:
        bn.reset_running_stats()
        bn.momentum = None
    model.train()
    for d, idx in round_robin_batches([len(x) for x in datasets], cfg.batch_size, rng):
        if len(idx) < 2:
            continue
        images = [datasets[d][i] for i in idx]
        x, xp = _batch_tensors([sample_patch(img, rng, cfg.augment) for img in images], images, cfg.in_channels)
        model(x, d)
        model(xp, d)
    for bn, m in zip(layers, momenta):
        bn.momentum = m


def train_stage1(cfg: Stage1Config, datasets: Sequence[Sequence[np.ndarray]], domain_names=None,
                 progress=None) -> Stage1Result:
    """Train the siamese network on domain-homogeneous, round-robin batches.

    ``datasets[d]`` holds domain ``d``'s images (H x W x C, at ``cfg.image_size``).
    """
    if not datasets or not any(len(x) for x in datasets):
        raise ValueError("empty dataset")
    if not 0 <= cfg.frozen_norm_epochs <= cfg.epochs:
        raise ValueError("frozen_norm_epochs must lie in [0, epochs]")
    t0 = time.time()
    rng = seed_everything(cfg.seed)
    model = build_siamese(cfg, len(datasets))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    curve = []
    # batch statistics differ between the image and the patch branch; the last
    # ``frozen_norm_epochs`` train against the fixed statistics used at inference
    freeze_at = cfg.epochs - cfg.frozen_norm_epochs
    for epoch in range(cfg.epochs):
        if epoch == freeze_at and cfg.frozen_norm_epochs > 0:
            recalibrate_norm(model, datasets, cfg, rng)
        model.train()
        if epoch >= freeze_at:
            for bn in norm_layers(model):
                bn.eval()
        losses = []
        for d, idx in round_robin_batches([len(x) for x in datasets], cfg.batch_size, rng):
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            loss = stage1_step(model, [datasets[d][i] for i in idx], d, rng, cfg)
            check_finite(loss, f"stage1 epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        if progress:
            progress(epoch, curve[-1])
        log.info("stage1 epoch %d loss %.4f", epoch, curve[-1])
    model.eval()
    names = list(domain_names) if domain_names else [f"domain{d}" for d in range(len(datasets))]
    return Stage1Result(model, cfg, curve, names, time.time() - t0)


# ---------------------------------------------------------------- inference

@dataclass
class PseudoLabelStore:
    domain_name: str
    oneshot_id: str
    coords: dict = field(default_factory=dict)  # image_id -> N x 2
    confidence: dict = field(default_factory=dict)  # image_id -> N
    clamped: list = field(default_factory=list)  # landmark indices whose crop hit the border
    checkpoint_hash: str = ""

    def __len__(self) -> int:
        return len(self.coords)

    def landmarks(self, image_id: str, domain_id: int = 0) -> LandmarkSet:
        return LandmarkSet(self.coords[image_id], domain_id)

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for image_id in sorted(self.coords):
            with open(root / f"{image_id}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["landmark_index", "i", "j", "confidence"])
                for n, ((i, j), c) in enumerate(zip(self.coords[image_id], self.confidence[image_id])):
                    w.writerow([n, repr(float(i)), repr(float(j)), repr(float(c))])
        manifest = {
            "domain": self.domain_name,
            "oneshot_id": self.oneshot_id,
            "checkpoint_hash": self.checkpoint_hash,
            "clamped_landmarks": list(self.clamped),
            "images": sorted(self.coords),
        }
        (root / "index.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return root

    @classmethod
    def load(cls, root) -> "PseudoLabelStore":
        root = Path(root)
        man = json.loads((root / "index.json").read_text())
        store = cls(man["domain"], man["oneshot_id"], clamped=list(man.get("clamped_landmarks", [])),
                    checkpoint_hash=man.get("checkpoint_hash", ""))
        for image_id in man["images"]:
            rows = []
            with open(root / f"{image_id}.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    rows.append((int(row["landmark_index"]), float(row["i"]), float(row["j"]),
                                 float(row["confidence"])))
            rows.sort()
            store.coords[image_id] = np.array([(r[1], r[2]) for r in rows])
            store.confidence[image_id] = np.array([r[3] for r in rows])
        return store


def fuse_maps(maps: Sequence[torch.Tensor], size) -> torch.Tensor:
    """Product of per-scale maps bilinearly upsampled to ``size``, renormalised.

    Each map is ``... x h x w``; the product is taken in log space.
    """
    acc = None
    for m in maps:
        lead = m.shape[:-2]
        up = F.interpolate(m.reshape(-1, 1, *m.shape[-2:]), size=tuple(size), mode="bilinear",
                           align_corners=False).reshape(*lead, *size)
        term = torch.log(up.clamp_min(1e-30))
        acc = term if acc is None else acc + term
    flat = acc.reshape(*acc.shape[:-2], -1)
    return F.softmax(flat, dim=-1).reshape(acc.shape)


def oneshot_patches(image: np.ndarray, coords: np.ndarray):
    """Half-size crops centred on each landmark, clamped inside the image."""
    h, w = image.shape[:2]
    ph, pw = h // 2, w // 2
    patches, local, clamped = [], [], []
    for n, (i, j) in enumerate(coords):
        oi = int(round(i)) - ph // 2
        oj = int(round(j)) - pw // 2
        ci, cj = min(max(oi, 0), h - ph), min(max(oj, 0), w - pw)
        if (ci, cj) != (oi, oj):
            clamped.append(n)
        patches.append(image[ci:ci + ph, cj:cj + pw])
        local.append((i - ci, j - cj))
    return patches, np.array(local, dtype=np.float64), clamped


@torch.no_grad()
def infer_pseudo_labels(model: SiameseNet, oneshot: ImageRecord, unlabeled: Sequence[ImageRecord], d: int,
                        domain_name: str = "", batch_size: int = 16, tta: int = 0, seed: int = 0,
                        temperature: float = 1.0) -> PseudoLabelStore:
    """Match the one-shot landmark patches into every unlabeled image.

    With ``tta > 0`` the log-probabilities of ``tta`` randomly augmented copies
    of each one-shot patch are averaged with the raw patch.
    """
    if oneshot.landmarks is None:
        raise ValueError("one-shot record needs landmarks")
    store = PseudoLabelStore(domain_name or f"domain{d}", oneshot.image_id)
    if not unlabeled:
        return store
    for rec in unlabeled:
        if rec.domain_id != oneshot.domain_id:
            raise ValueError(f"{rec.image_id}: all images must share the one-shot domain")
    model.eval()
    ch = model.in_ch
    coords = oneshot.landmarks.coords
    patches, local, clamped = oneshot_patches(oneshot.pixels, coords)
    store.clamped = clamped
    variants = [(patches, local)]
    rng = np.random.default_rng(seed)
    for _ in range(tta):
        augs = [random_augmentation(rng, p.shape) for p in patches]
        variants.append(([a.apply(p) for a, p in zip(augs, patches)],
                         np.array([a.map_point(q, p.shape) for a, p, q in zip(augs, patches, local)])))
    patch_feats = [(model(images_to_tensor(ps, ch), d), q) for ps, q in variants]
    size = unlabeled[0].shape
    for start in range(0, len(unlabeled), batch_size):
        chunk = unlabeled[start:start + batch_size]
        fi = model(images_to_tensor([r.pixels for r in chunk], ch), d)
        log_fused = 0.0
        for fp, q in patch_feats:
            per_scale = []
            for img_s, patch_s, s in zip(fi.scales, fp.scales, fi.strides):
                idx = cell_index(torch.as_tensor(q), s, patch_s.shape[-2:])
                qv = F.normalize(patch_s[torch.arange(len(q)), :, idx[:, 0], idx[:, 1]], dim=1)
                cos = torch.einsum("nc,bchw->bnhw", qv, F.normalize(img_s, dim=1))
                b, n, h, w = cos.shape
                per_scale.append(F.softmax(cos.reshape(b, n, -1) / temperature, dim=-1).reshape(b, n, h, w))
            log_fused = log_fused + torch.log(fuse_maps(per_scale, size).clamp_min(1e-30))
        fused = F.softmax(log_fused.reshape(*log_fused.shape[:2], -1) / len(patch_feats), dim=-1)
        peak, arg = fused.max(dim=-1)
        rows = (arg // size[1]).double()
        cols = (arg % size[1]).double()
        for k, rec in enumerate(chunk):
            store.coords[rec.image_id] = torch.stack([rows[k], cols[k]], dim=-1).numpy()
            store.confidence[rec.image_id] = peak[k].double().numpy()
    return store
