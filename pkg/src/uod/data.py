"""On-disk dataset layout, resizing and the synthetic multi-domain generator.

Layout of one domain directory::

    domain.json              name, num_landmarks, pixel_spacing, ...
    images/<image_id>.png    8- or 16-bit grayscale
    landmarks/<image_id>.csv rows ``index,i,j`` (row, col; zero-indexed)
    splits.json              {"train": [...], "test": [...], "oneshot_id": "..."}
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from uod.domain import PIXEL_ONLY, DomainRegistry, DomainSpec, ImageRecord, LandmarkSet, record_violations


class DataError(ValueError):
    """Dataset layout or content is invalid."""


@dataclass
class Splits:
    train: list
    test: list
    oneshot_id: str

    def to_dict(self) -> dict:
        return {"train": list(self.train), "test": list(self.test), "oneshot_id": self.oneshot_id}


# ---------------------------------------------------------------- reading

def read_image(path: Path) -> np.ndarray:
    """Grayscale image as H x W x 1 float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode in ("RGB", "RGBA", "P", "LA"):
                im = im.convert("L")
            arr = np.array(im)
    except (OSError, ValueError) as e:
        raise DataError(f"unreadable image {path}: {e}") from e
    if arr.dtype == np.uint8:
        out = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32, np.int16) or im.mode.startswith("I"):
        out = arr.astype(np.float64) / 65535.0
    elif arr.dtype == bool:
        out = arr.astype(np.float64)
    else:
        out = arr.astype(np.float64)
    if out.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image")
    return np.clip(out, 0.0, 1.0)[:, :, None]


def read_landmarks(path: Path) -> np.ndarray:
    rows = []
    try:
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().lower() == "index":
                    continue
                rows.append((int(row[0]), float(row[1]), float(row[2])))
    except (OSError, ValueError, IndexError) as e:
        raise DataError(f"unreadable landmark file {path}: {e}") from e
    rows.sort(key=lambda r: r[0])
    if [r[0] for r in rows] != list(range(len(rows))):
        raise DataError(f"{path}: landmark indices must be 0..N-1")
    return np.array([(r[1], r[2]) for r in rows], dtype=np.float64).reshape(-1, 2)


def load_dataset(root, domain_id: int = 0):
    """Read one domain directory. Returns ``(DomainSpec, records, Splits)``."""
    root = Path(root)
    desc = root / "domain.json"
    if not desc.exists():
        raise DataError(f"missing domain descriptor {desc}")
    meta = json.loads(desc.read_text())
    split_path = root / "splits.json"
    if not split_path.exists():
        raise DataError(f"missing split manifest {split_path}")
    sp = json.loads(split_path.read_text())
    splits = Splits(list(sp["train"]), list(sp["test"]), sp["oneshot_id"])
    if splits.oneshot_id not in splits.train:
        raise DataError(f"one-shot image {splits.oneshot_id!r} must belong to the training split")
    if "native_size" not in meta:
        first = splits.train[0] if splits.train else None
        meta["native_size"] = list(read_image(root / "images" / f"{first}.png").shape[:2]) if first else [1, 1]
    try:
        spec = DomainSpec.from_dict({**meta, "domain_id": domain_id})
        spec.validate()
    except (KeyError, ValueError) as e:
        raise DataError(f"{desc}: {e}") from e
    records = []
    for image_id in splits.train + splits.test:
        img_path = root / "images" / f"{image_id}.png"
        if not img_path.exists():
            raise DataError(f"split id {image_id!r} has no image {img_path}")
        lm = None
        lm_path = root / "landmarks" / f"{image_id}.csv"
        if lm_path.exists():
            coords = read_landmarks(lm_path)
            if len(coords) != spec.num_landmarks:
                raise DataError(f"{lm_path}: expected {spec.num_landmarks} landmarks, found {len(coords)}")
            lm = LandmarkSet(coords, domain_id)
        rec = ImageRecord(image_id, read_image(img_path), domain_id, lm)
        problems = record_violations(rec, spec)
        if problems:
            raise DataError(f"{image_id}: " + "; ".join(problems))
        records.append(rec)
    return spec, records, splits


# ---------------------------------------------------------------- writing

def _fmt(x: float) -> str:
    return repr(float(x))


def write_landmarks(path: Path, coords: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "i", "j"])
        for k, (i, j) in enumerate(np.asarray(coords, dtype=np.float64)):
            w.writerow([k, _fmt(i), _fmt(j)])


def write_image(path: Path, pixels: np.ndarray, bits: int = 8) -> None:
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 3:
        px = px[:, :, 0]
    if bits == 8:
        Image.fromarray(np.round(np.clip(px, 0, 1) * 255).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.round(np.clip(px, 0, 1) * 65535).astype(np.uint16)).save(path)
    else:
        raise DataError("bits must be 8 or 16")


def write_dataset(root, spec: DomainSpec, records: Sequence[ImageRecord], splits: Splits, bits: int = 8) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "landmarks").mkdir(parents=True, exist_ok=True)
    meta = spec.to_dict()
    meta.pop("domain_id")
    (root / "domain.json").write_text(json.dumps(meta, indent=2) + "\n")
    for rec in records:
        write_image(root / "images" / f"{rec.image_id}.png", rec.pixels, bits)
        if rec.landmarks is not None:
            write_landmarks(root / "landmarks" / f"{rec.image_id}.csv", rec.landmarks.coords)
    (root / "splits.json").write_text(json.dumps(splits.to_dict(), indent=2) + "\n")
    return root


# ---------------------------------------------------------------- resizing

def resize_pixels(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = pixels.shape[:2]
    if (h, w) == tuple(size):
        return pixels.copy()
    t = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None].double()
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return np.clip(out[0].numpy().transpose(1, 2, 0), 0.0, 1.0)


def scale_coords(coords: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Map ``(row, col)`` coordinates by the ratio ``dst / src`` per axis."""
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return c * np.array([dst[0] / src[0], dst[1] / src[1]])


def resize_with_landmarks(rec: ImageRecord, size) -> ImageRecord:
    if isinstance(size, int):
        size = (size, size)
    size = (int(size[0]), int(size[1]))
    if min(size) <= 0:
        raise DataError(f"degenerate target size {size}")
    lm = None
    if rec.landmarks is not None:
        lm = LandmarkSet(scale_coords(rec.landmarks.coords, rec.shape, size), rec.landmarks.domain_id)
    return ImageRecord(rec.image_id, resize_pixels(rec.pixels, size), rec.domain_id, lm)


# ---------------------------------------------------------------- synthesis

MIN_SYNTH_SIZE = 32
KINDS = ("skull", "hand")
DEFAULT_LANDMARKS = {"skull": 8, "hand": 6}


@dataclass
class SynthDomainRecipe:
    kind: str
    num_landmarks: int
    size: int = 64
    count: int = 200
    noise: float = 0.03
    seed: int = 7
    name: str = ""
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown generator kind {self.kind!r}")
        if not self.name:
            self.name = f"{self.kind}"
        if self.size < MIN_SYNTH_SIZE:
            raise DataError(f"size {self.size} too small for shape margins (min {MIN_SYNTH_SIZE})")
        if not 1 <= self.num_landmarks <= DEFAULT_LANDMARKS[self.kind] * 2:
            raise DataError(f"{self.kind} supports 1..{DEFAULT_LANDMARKS[self.kind] * 2} landmarks")
        if self.count < 2:
            raise DataError("need at least 2 images")


def _smoothstep(x, width):
    return 1.0 / (1.0 + np.exp(-x / width))


def _capsule_dist(rr, cc, p0, p1):
    """Distance from every pixel to the segment p0-p1."""
    d = np.array(p1) - np.array(p0)
    t = ((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / max(d @ d, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(rr - (p0[0] + t * d[0]), cc - (p0[1] + t * d[1]))


def _background(rng, s):
    rr, cc = np.mgrid[0:s, 0:s] / s
    g = rng.uniform(-1, 1, 3)
    return 0.12 + 0.05 * (g[0] * rr + g[1] * cc) + 0.03 * np.sin(2 * np.pi * (rr + g[2]))


def _skull(rng, s):
    """Ellipse ring with spokes of distinct length and an off-center nucleus."""
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64)
    cy, cx = s / 2 + rng.uniform(-0.05, 0.05, 2) * s
    a, b = s * 0.33 * rng.uniform(0.92, 1.08), s * 0.27 * rng.uniform(0.92, 1.08)
    th = rng.uniform(-0.25, 0.25)
    ct, st = math.cos(th), math.sin(th)

    def at(u, v):  # ellipse frame (u along a, v along b) -> (row, col)
        return cy + u * ct - v * st, cx + u * st + v * ct

    du, dv = (rr - cy) * ct + (cc - cx) * st, -(rr - cy) * st + (cc - cx) * ct
    rad = np.sqrt((du / a) ** 2 + (dv / b) ** 2)
    img = _background(rng, s)
    img = img + 0.65 * np.exp(-(((rad - 1.0) * min(a, b)) ** 2) / (2 * 1.1**2))
    img = img + 0.25 * _smoothstep(1.0 - rad, 0.03)
    pts = [at(-a, 0), at(0, b), at(a, 0), at(0, -b)]
    lengths = (0.42, 0.62, 0.52, 0.72)
    for k, (ang, ln) in enumerate(zip((0.25, 0.75, 1.25, 1.75), lengths)):
        phi = math.pi * ang + rng.uniform(-0.08, 0.08)
        u, v = a * ln * math.cos(phi), b * ln * math.sin(phi)
        tip = at(u, v)
        img = img + 0.35 * _smoothstep(1.2 - _capsule_dist(rr, cc, (cy, cx), tip), 0.35)
        img = img + 0.4 * np.exp(-((rr - tip[0]) ** 2 + (cc - tip[1]) ** 2) / (2 * (1.2 + 0.3 * k) ** 2))
        pts.append(tip)
    nu = at(-0.45 * a, 0.35 * b)
    img = img + 0.3 * np.exp(-((rr - nu[0]) ** 2 + (cc - nu[1]) ** 2) / (2 * (0.06 * s) ** 2))
    # extra points for larger landmark counts: ring at the diagonals
    for k in range(4):
        phi = math.pi * (0.25 + 0.5 * k)
        pts.append(at(a * math.cos(phi), b * math.sin(phi)))
    return img, np.array(pts)


def _hand(rng, s):
    """Palm with five fingers of distinct length and angle."""
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64)
    py, px = s * 0.66 + rng.uniform(-0.04, 0.04) * s, s / 2 + rng.uniform(-0.05, 0.05) * s
    scale = rng.uniform(0.92, 1.08) * s
    rot = rng.uniform(-0.15, 0.15)
    pr, pc = 0.17 * scale, 0.2 * scale
    img = _background(rng, s)
    palm = np.sqrt(((rr - py) / pr) ** 2 + ((cc - px) / pc) ** 2)
    img = img + 0.45 * _smoothstep(1.0 - palm, 0.04)
    angles = np.array([-1.05, -0.45, -0.05, 0.35, 0.8]) + rot + rng.uniform(-0.06, 0.06, 5)
    lengths = np.array([0.21, 0.35, 0.39, 0.33, 0.24]) * scale * rng.uniform(0.95, 1.05, 5)
    widths = (2.2, 1.6, 1.6, 1.5, 1.3)
    tips, bases = [], []
    for ang, ln, wd in zip(angles, lengths, widths):
        base = (py - pr * 0.6 * math.cos(ang), px + pc * 0.9 * math.sin(ang))
        tip = (base[0] - ln * math.cos(ang), base[1] + ln * math.sin(ang))
        img = img + 0.45 * _smoothstep(wd - _capsule_dist(rr, cc, base, tip), 0.35)
        img = img + 0.25 * np.exp(-((rr - tip[0]) ** 2 + (cc - tip[1]) ** 2) / (2 * 1.3**2))
        tips.append(tip)
        bases.append(base)
    wrist = (py + pr, px)
    img = img + 0.3 * _smoothstep(2.5 - _capsule_dist(rr, cc, wrist, (min(s - 1.0, py + pr + 0.12 * s), px)), 0.4)
    return img, np.array(tips + [wrist] + bases)


GENERATORS = {"skull": _skull, "hand": _hand}


def synth_image(recipe: SynthDomainRecipe, index: int, domain_id: int = 0) -> ImageRecord:
    rng = np.random.default_rng([recipe.seed, KINDS.index(recipe.kind), index])
    img, pts = GENERATORS[recipe.kind](rng, recipe.size)
    if recipe.noise > 0:
        img = img + rng.normal(0.0, recipe.noise, img.shape)
    # quantize so the record equals what an 8-bit PNG round trip returns
    img = np.round(np.clip(img, 0.0, 1.0) * 255) / 255.0
    pts = pts[: recipe.num_landmarks]
    margin = 2.0
    if pts.min() < margin or pts.max() > recipe.size - 1 - margin:
        raise DataError(f"{recipe.kind} #{index}: landmark within {margin}px of the border")
    lm = LandmarkSet(pts, domain_id)
    return ImageRecord(f"{recipe.name}_{index:04d}", img[:, :, None], domain_id, lm)


def synth_domain(recipe: SynthDomainRecipe, domain_id: int = 0):
    spec = DomainSpec(recipe.name, recipe.num_landmarks, (recipe.size, recipe.size), 1, PIXEL_ONLY,
                      domain_id=domain_id)
    records = [synth_image(recipe, i, domain_id) for i in range(recipe.count)]
    n_test = max(1, int(round(recipe.count * recipe.test_fraction)))
    ids = [r.image_id for r in records]
    splits = Splits(ids[: len(ids) - n_test], ids[len(ids) - n_test:], ids[0])
    return spec, records, splits


def synth_generate(recipes: Sequence[SynthDomainRecipe], out) -> list[Path]:
    """Write one dataset layout per recipe under ``out/<name>``."""
    out = Path(out)
    names = [r.name for r in recipes]
    if len(set(names)) != len(names):
        raise DataError("recipe names must be unique")
    paths = []
    for d, recipe in enumerate(recipes):
        spec, records, splits = synth_domain(recipe, d)
        paths.append(write_dataset(out / recipe.name, spec, records, splits))
    return paths


def default_recipes(num_domains: int = 2, size: int = 64, count: int = 200, seed: int = 7, noise: float = 0.03):
    recipes = []
    for d in range(num_domains):
        kind = KINDS[d % len(KINDS)]
        name = kind if d < len(KINDS) else f"{kind}{d}"
        recipes.append(SynthDomainRecipe(kind, DEFAULT_LANDMARKS[kind], size, count, noise, seed + d, name))
    return recipes


def load_domains(roots: Sequence) -> tuple[DomainRegistry, list, list]:
    """Load several domain directories into one registry (ids in argument order)."""
    reg = DomainRegistry()
    all_records, all_splits = [], []
    for d, root in enumerate(roots):
        spec, records, splits = load_dataset(root, d)
        reg.register(spec)
        all_records.append(records)
        all_splits.append(splits)
    return reg.seal(), all_records, all_splits
