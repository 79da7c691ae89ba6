"""End-to-end orchestration shared by the CLI and the acceptance suite.

Coordinates in pseudo-label stores and predictions are always native pixels;
each stage resizes images to its own working size and maps coordinates back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from uod.checkpoint import Checkpoint, Segment
from uod.data import DataError, Splits, load_domains, resize_with_landmarks, scale_coords
from uod.domain import DomainRegistry, DomainSpec, ImageRecord
from uod.metrics import DEFAULT_THRESHOLDS_MM, EvalReport, evaluate_domain
from uod.stage1 import PseudoLabelStore, Stage1Config, build_siamese, infer_pseudo_labels, train_stage1
from uod.stage2 import (DomainTrainData, Stage2Config, build_datr, predict, split_validation,
                        train_stage2)

log = logging.getLogger(__name__)


@dataclass
class DomainData:
    spec: DomainSpec
    records: list  # native-resolution ImageRecords
    splits: Splits

    def by_id(self) -> dict:
        return {r.image_id: r for r in self.records}

    def subset(self, ids) -> list:
        table = self.by_id()
        return [table[i] for i in ids]

    @property
    def train(self) -> list:
        return self.subset(self.splits.train)

    @property
    def test(self) -> list:
        return self.subset(self.splits.test)

    def oneshot(self, image_id: Optional[str] = None) -> ImageRecord:
        image_id = image_id or self.splits.oneshot_id
        if image_id not in set(self.splits.train):
            raise DataError(f"{self.spec.name}: one-shot id {image_id!r} is not a training image")
        rec = self.by_id()[image_id]
        if rec.landmarks is None:
            raise DataError(f"{self.spec.name}: one-shot image {image_id!r} has no landmarks")
        return rec


def load(roots: Sequence) -> tuple[DomainRegistry, list[DomainData]]:
    reg, records, splits = load_domains(roots)
    return reg, [DomainData(spec, recs, sp) for spec, recs, sp in zip(reg, records, splits)]


def resize_all(records: Sequence[ImageRecord], size: int) -> list[ImageRecord]:
    return [resize_with_landmarks(r, (size, size)) for r in records]


# ---------------------------------------------------------------- stage I

def run_stage1(domains: Sequence[DomainData], registry: DomainRegistry, cfg: Stage1Config,
               progress=None) -> Checkpoint:
    """Self-supervised training on the training split of every domain."""
    data = [[r.pixels for r in resize_all(dom.train, cfg.image_size)] for dom in domains]
    res = train_stage1(cfg, data, [dom.spec.name for dom in domains], progress)
    seg = Segment.from_model(res.model, cfg.to_dict(), loss_curve=res.loss_curve, seconds=res.seconds)
    return Checkpoint(registry.to_list(), {"stage1": seg})


def load_siamese(ckpt: Checkpoint):
    seg = ckpt.segment("stage1")
    cfg = Stage1Config.from_dict(seg.config)
    model = build_siamese(cfg, len(ckpt.registry))
    model.load_state_dict(seg.state)
    model.eval()
    return model, cfg


def label_domain(ckpt: Checkpoint, dom: DomainData, d: int, oneshot_id: Optional[str] = None,
                 records: Optional[Sequence[ImageRecord]] = None, tta: int = 0, ckpt_hash: str = "",
                 model=None) -> PseudoLabelStore:
    """Pseudo labels (native px) for ``records`` (default: the training split)."""
    if model is None:
        model, cfg = load_siamese(ckpt)
    else:
        cfg = Stage1Config.from_dict(ckpt.segment("stage1").config)
    oneshot = dom.oneshot(oneshot_id)
    records = dom.train if records is None else list(records)
    size = cfg.image_size
    work_one = resize_with_landmarks(oneshot, (size, size))
    work = resize_all(records, size)
    store = infer_pseudo_labels(model, work_one, work, d, dom.spec.name, tta=tta, seed=cfg.seed,
                                temperature=cfg.temperature)
    for rec in records:
        store.coords[rec.image_id] = scale_coords(store.coords[rec.image_id], (size, size), rec.shape)
    store.checkpoint_hash = ckpt_hash
    return store


def label(ckpt: Checkpoint, domains: Sequence[DomainData], registry: DomainRegistry,
          oneshot_ids: Optional[Sequence[Optional[str]]] = None, tta: int = 0, ckpt_hash: str = "") -> list:
    ckpt.check_registry(registry)
    model, _ = load_siamese(ckpt)
    ids = list(oneshot_ids) if oneshot_ids else [None] * len(domains)
    return [label_domain(ckpt, dom, d, ids[d], tta=tta, ckpt_hash=ckpt_hash, model=model)
            for d, dom in enumerate(domains)]


# ---------------------------------------------------------------- stage II

def stage2_inputs(domains: Sequence[DomainData], stores: Sequence[PseudoLabelStore],
                  cfg: Stage2Config) -> list[DomainTrainData]:
    """Working-size images and labels; the one-shot image keeps its true annotation
    and a validation subset of the pseudo-labelled images is held out."""
    rng = np.random.default_rng(cfg.seed)
    size = (cfg.image_size, cfg.image_size)
    out = []
    for dom, store in zip(domains, stores):
        missing = [i for i in dom.splits.train if i not in store.coords and i != store.oneshot_id]
        if missing:
            raise DataError(f"{dom.spec.name}: {len(missing)} training images lack pseudo labels")
        val = split_validation(dom.splits.train, cfg.val_fraction, rng, keep=[store.oneshot_id])
        tdata = DomainTrainData(dom.spec.name, [], [])
        for rec in dom.train:
            coords = rec.landmarks.coords if rec.image_id == store.oneshot_id else store.coords[rec.image_id]
            work = resize_with_landmarks(ImageRecord(rec.image_id, rec.pixels, rec.domain_id), size)
            lab = scale_coords(coords, rec.shape, size)
            if rec.image_id in val:
                tdata.val_images.append(work.pixels)
                tdata.val_labels.append(lab)
            else:
                tdata.images.append(work.pixels)
                tdata.labels.append(lab)
        out.append(tdata)
    return out


def run_stage2(domains: Sequence[DomainData], registry: DomainRegistry, stores: Sequence[PseudoLabelStore],
               cfg: Stage2Config, stage1: Optional[Segment] = None, progress=None) -> Checkpoint:
    for dom, store in zip(domains, stores):
        if store.domain_name != dom.spec.name:
            raise DataError(f"pseudo labels for {store.domain_name!r} given for domain {dom.spec.name!r}")
    res = train_stage2(cfg, stage2_inputs(domains, stores, cfg), progress)
    seg = Segment.from_model(res.model, cfg.to_dict(), cfg.block_variant, history=res.history,
                             best_epoch=res.best_epoch, seconds=res.seconds)
    segments = {"stage2": seg}
    if stage1 is not None:
        segments["stage1"] = stage1
    return Checkpoint(registry.to_list(), segments, {"block_variant": cfg.block_variant})


def load_datr(ckpt: Checkpoint):
    seg = ckpt.segment("stage2")
    cfg = Stage2Config.from_dict(seg.config)
    model = build_datr(cfg, [r["num_landmarks"] for r in ckpt.registry])
    model.load_state_dict(seg.state)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------- evaluation

def predict_records(ckpt: Checkpoint, records: Sequence[ImageRecord], d: int, model=None) -> dict:
    if model is None:
        model, cfg = load_datr(ckpt)
    else:
        cfg = Stage2Config.from_dict(ckpt.segment("stage2").config)
    out = {}
    for rec in records:
        lm, _, failed = predict(model, cfg, rec, d)
        coords = lm.coords.copy()
        # an undecodable landmark is scored at the image centre rather than dropped
        coords[failed] = ((rec.shape[0] - 1) / 2, (rec.shape[1] - 1) / 2)
        out[rec.image_id] = coords
    return out


def evaluate(ckpt: Checkpoint, domains: Sequence[DomainData], registry: DomainRegistry, split: str = "test",
             thresholds=DEFAULT_THRESHOLDS_MM, unit: str = "mm") -> tuple[EvalReport, list]:
    """Score Stage II predictions on a split; returns the report and per-domain predictions."""
    ckpt.check_registry(registry)
    model, _ = load_datr(ckpt)
    report = EvalReport(unit, list(thresholds))
    preds = []
    for d, dom in enumerate(domains):
        recs = dom.test if split == "test" else dom.train
        p = predict_records(ckpt, recs, d, model)
        errs = evaluate_domain([p[r.image_id] for r in recs], [r.landmarks.coords for r in recs], dom.spec,
                               thresholds, unit)
        report.add_domain(dom.spec.name, errs)
        preds.append(p)
    return report, preds


def store_errors(store: PseudoLabelStore, dom: DomainData, ids=None) -> np.ndarray:
    """Radial errors (images x landmarks, native px) of pseudo labels vs ground truth."""
    table = dom.by_id()
    ids = sorted(store.coords) if ids is None else ids
    return np.stack([np.linalg.norm(store.coords[i] - table[i].landmarks.coords, axis=1) for i in ids])


# ---------------------------------------------------------------- sweep

SWEEP_MODES = ("single", "universal")


def sweep(domains: Sequence[DomainData], registry: DomainRegistry, target: int, candidates: Sequence[str],
          cfg1: Stage1Config, cfg2: Optional[Stage2Config] = None, progress=None) -> list[dict]:
    """One-shot robustness sweep for domain ``target``.

    Stage I never sees landmark annotations, so each mode's model is trained once
    and reused for every candidate; only labelling (and optional Stage II) is
    repeated per candidate. Rows: mode, candidate, mre (test split, native px).
    """
    if len(candidates) < 2:
        raise ValueError("sweep needs at least 2 one-shot candidates")
    if len(domains) < 2:
        raise ValueError("sweep needs at least 2 domains")
    for c in candidates:
        domains[target].oneshot(c)
    rows = []
    for mode in SWEEP_MODES:
        if mode == "single":
            doms = [domains[target]]
            reg = DomainRegistry.from_list([{**domains[target].spec.to_dict(), "domain_id": 0}])
            d = 0
        else:
            doms, reg, d = list(domains), registry, target
        torch.manual_seed(cfg1.seed)
        ckpt = run_stage1(doms, reg, cfg1)
        model, _ = load_siamese(ckpt)
        for cand in candidates:
            dom = doms[d]
            if cfg2 is None:
                store = label_domain(ckpt, dom, d, cand, records=dom.test, model=model)
                err = store_errors(store, dom)
            else:
                stores = [label_domain(ckpt, x, k, cand if k == d else None, model=model)
                          for k, x in enumerate(doms)]
                c2 = run_stage2(doms, reg, stores, cfg2)
                rep, _ = evaluate(c2, doms, reg, unit="px", thresholds=(1.0, 2.0, 3.0, 4.0))
                err = np.array([rep.domains[dom.spec.name]["mre"]])
            row = {"mode": mode, "candidate": cand, "seed": cfg1.seed, "mre": float(err.mean())}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def spread(rows: Sequence[dict]) -> dict:
    """max - min candidate MRE per mode (seeds averaged per candidate first)."""
    out = {}
    for mode in {r["mode"] for r in rows}:
        per = {}
        for r in rows:
            if r["mode"] == mode:
                per.setdefault(r["candidate"], []).append(r["mre"])
        vals = [np.mean(v) for v in per.values()]
        out[mode] = float(max(vals) - min(vals))
    return out
