"""``uod`` command line: synth, stage1, label, stage2, eval, viz, sweep.

Every artifact-producing command writes ``manifest.json`` next to its outputs.
Hyperparameters resolve as built-in defaults < ``--config`` JSON < explicit flags.
Exit codes: 0 ok, 2 usage error, 3 data validation error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from uod import __version__, pipeline
from uod.checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from uod.common import NumericError
from uod.data import MIN_SYNTH_SIZE, DataError, default_recipes, synth_generate
from uod.datb import VARIANTS
from uod.domain import DomainError
from uod.metrics import DEFAULT_THRESHOLDS_MM, MetricError, UnitError, radial_errors
from uod.stage1 import PseudoLabelStore, Stage1Config
from uod.stage2 import Stage2Config

log = logging.getLogger("uod")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

STAGE1_FLAGS = {"img_size": "image_size", "lr": "lr", "batch": "batch_size", "epochs": "epochs", "seed": "seed",
                "temperature": "temperature", "points_per_patch": "points_per_patch",
                "frozen_norm_epochs": "frozen_norm_epochs"}
STAGE2_FLAGS = {"img_size": "image_size", "lr": "lr", "batch": "batch_size", "epochs": "epochs", "seed": "seed",
                "sigma": "sigma", "alpha": "alpha", "variant": "block_variant", "val_fraction": "val_fraction"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def fmt_num(x) -> str:
    return np.format_float_positional(float(x), trim="-")


def prepare_out(path, force: bool) -> Path:
    """Outputs go to a fresh directory; an existing non-empty one needs --force."""
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output {out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def read_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {p}: expected a JSON object")
    return cfg


def resolve(cls, args, flags: dict):
    """Build a config dataclass: defaults, then the config file, then explicit flags."""
    values = cls().to_dict()
    file_cfg = read_config(getattr(args, "config", None))
    unknown = set(file_cfg) - set(values)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    values.update(file_cfg)
    for flag, field_name in flags.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field_name] = v
    return cls.from_dict(values)


def write_manifest(out: Path, args, config: dict, t0: float, inputs: dict, outputs: dict, seeds=None,
                   consumed=None) -> Path:
    """One manifest per command: enough to re-run it and to trace its artifacts."""
    produced = {}
    for name, p in outputs.items():
        if Path(p).is_file():
            produced[name] = file_hash(p)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config,
        "seeds": seeds if seeds is not None else [config.get("seed")],
        "inputs": {k: str(v) if not isinstance(v, list) else [str(x) for x in v] for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "hashes": {"consumed": consumed or {}, "produced": produced},
        "timing": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(t0)),
                   "seconds": round(time.time() - t0, 3)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def parse_thresholds(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --thresholds {text!r}") from None
    if not vals or any(b <= a for a, b in zip(vals, vals[1:])) or vals[0] <= 0:
        raise UsageError("--thresholds must be positive and strictly increasing")
    return vals


def parse_oneshot(items, domains) -> list:
    """``name=image_id`` pairs to a per-domain list (None keeps the splits' choice)."""
    ids = [None] * len(domains)
    names = [dom.spec.name for dom in domains]
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--oneshot expects name=image_id, got {item!r}")
        name, image_id = item.split("=", 1)
        if name not in names:
            raise UsageError(f"--oneshot: unknown domain {name!r}")
        ids[names.index(name)] = image_id
    return ids


def write_rows(path: Path, rows, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    t0 = time.time()
    if args.size < MIN_SYNTH_SIZE:
        raise DataError(f"--size {args.size} is below the minimum {MIN_SYNTH_SIZE} needed for shape margins")
    if args.domains < 1 or args.count < 2:
        raise UsageError("--domains must be >= 1 and --count >= 2")
    out = prepare_out(args.out, args.force)
    recipes = default_recipes(args.domains, args.size, args.count, args.seed, args.noise)
    paths = synth_generate(recipes, out)
    for p in paths:
        print(f"wrote {p}")
    config = {"domains": args.domains, "size": args.size, "count": args.count, "seed": args.seed,
              "noise": args.noise, "recipes": [r.__dict__ for r in recipes]}
    write_manifest(out, args, config, t0, {}, {p.name: p for p in paths})
    return EXIT_OK


def cmd_stage1(args) -> int:
    t0 = time.time()
    cfg = resolve(Stage1Config, args, STAGE1_FLAGS)
    print(f"stage1 img_size={cfg.image_size} lr={fmt_num(cfg.lr)} batch={cfg.batch_size} epochs={cfg.epochs} "
          f"seed={cfg.seed}")
    reg, domains = pipeline.load(args.data)
    out = prepare_out(args.out, args.force)
    rows = []

    def progress(epoch, loss):
        rows.append({"epoch": epoch, "train_loss": loss})
        print(f"epoch {epoch} loss {loss:.5f}", flush=True)

    ckpt = pipeline.run_stage1(domains, reg, cfg, progress)
    path = out / "stage1.pt"
    save_checkpoint(ckpt, path)
    write_rows(out / "progress.csv", rows, ["epoch", "train_loss"])
    write_manifest(out, args, cfg.to_dict(), t0, {"data": args.data}, {"checkpoint": path,
                                                                       "progress": out / "progress.csv"})
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_label(args) -> int:
    t0 = time.time()
    reg, domains = pipeline.load(args.data)
    ids = parse_oneshot(args.oneshot, domains)
    for dom, image_id in zip(domains, ids):
        dom.oneshot(image_id)  # refuses test-split ids before any work
    ckpt = load_checkpoint(args.checkpoint)
    h = file_hash(args.checkpoint)
    out = prepare_out(args.out, args.force)
    stores = pipeline.label(ckpt, domains, reg, ids, tta=args.tta, ckpt_hash=h)
    outputs = {}
    for dom, store in zip(domains, stores):
        store.save(out / dom.spec.name)
        outputs[dom.spec.name] = out / dom.spec.name / "index.json"
        msg = f"{dom.spec.name}: {len(store)} images labelled from one-shot {store.oneshot_id}"
        if store.clamped:
            msg += f" (border-clamped landmarks {store.clamped})"
        print(msg)
    config = {"tta": args.tta, "oneshot": {d.spec.name: s.oneshot_id for d, s in zip(domains, stores)},
              "seed": Stage1Config.from_dict(ckpt.segment("stage1").config).seed}
    write_manifest(out, args, config, t0, {"data": args.data, "checkpoint": args.checkpoint}, outputs,
                   consumed={str(args.checkpoint): h})
    return EXIT_OK


def _stage1_source(args):
    """Stage I checkpoint path: explicit flag, else the label manifest's input."""
    if args.stage1:
        return Path(args.stage1)
    man = Path(args.labels) / "manifest.json"
    if man.is_file():
        p = json.loads(man.read_text()).get("inputs", {}).get("checkpoint")
        if p and Path(p).is_file():
            return Path(p)
    return None


def cmd_stage2(args) -> int:
    t0 = time.time()
    cfg = resolve(Stage2Config, args, STAGE2_FLAGS)
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"stage2 img_size={cfg.image_size} lr={fmt_num(cfg.lr)} batch={cfg.batch_size} epochs={cfg.epochs} "
          f"sigma={fmt_num(cfg.sigma)} alpha={fmt_num(cfg.alpha)} variant={cfg.block_variant} seed={cfg.seed}")
    reg, domains = pipeline.load(args.data)
    stores = []
    for dom in domains:
        root = Path(args.labels) / dom.spec.name
        if not (root / "index.json").is_file():
            raise DataError(f"no pseudo labels for domain {dom.spec.name} under {args.labels}")
        stores.append(PseudoLabelStore.load(root))
    consumed = {}
    stage1 = None
    src = _stage1_source(args)
    if src is not None:
        c1 = load_checkpoint(src)
        c1.check_registry(reg)
        stage1 = c1.segment("stage1")
        consumed[str(src)] = file_hash(src)
    out = prepare_out(args.out, args.force)
    fields = None
    rows = []

    def progress(row):
        rows.append(row)
        print("epoch {epoch} train {train_loss:.5f} val {val_loss:.5f}".format(**row), flush=True)

    ckpt = pipeline.run_stage2(domains, reg, stores, cfg, stage1, progress)
    path = out / "stage2.pt"
    save_checkpoint(ckpt, path)
    fields = ["epoch", "train_loss", "val_loss"] + [f"val_mre_{d.spec.name}" for d in domains]
    write_rows(out / "progress.csv", rows, fields)
    write_manifest(out, args, cfg.to_dict(), t0, {"data": args.data, "labels": args.labels},
                   {"checkpoint": path, "progress": out / "progress.csv"}, consumed=consumed)
    print(f"checkpoint {path} (best epoch {ckpt.segment('stage2').extra['best_epoch']})")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    thresholds = parse_thresholds(args.thresholds)
    reg, domains = pipeline.load(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    report, preds = pipeline.evaluate(ckpt, domains, reg, args.split, thresholds, args.unit)
    out = prepare_out(args.out, args.force)
    (out / "report.json").write_text(report.to_json() + "\n")
    rows = []
    for name, r in report.domains.items():
        row = {"domain": name, "mre": r["mre"], "mre_std": r["mre_std"], "images": r["num_images"]}
        row.update({f"sdr_{k}": v for k, v in r["sdr"].items()})
        rows.append(row)
    write_rows(out / "report.csv", rows, list(rows[0]))
    fig = out / "per_landmark_mre.png"
    _per_landmark_figure(report, fig)
    print(f"variant={ckpt.meta.get('block_variant', '?')} split={args.split}")
    print(report.to_table())
    write_manifest(out, args, {"thresholds": thresholds, "unit": args.unit, "split": args.split}, t0,
                   {"data": args.data, "checkpoint": args.checkpoint},
                   {"report": out / "report.json", "table": out / "report.csv", "figure": fig},
                   seeds=[], consumed={str(args.checkpoint): file_hash(args.checkpoint)})
    return EXIT_OK


def _per_landmark_figure(report, path) -> None:
    from uod import plotting

    plt = plotting.plt
    fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
    width = 0.8 / max(1, len(report.domains))
    for k, (name, r) in enumerate(report.domains.items()):
        v = r["per_landmark_mre"]
        ax.bar(np.arange(len(v)) + k * width, v, width, label=f"{name} (MRE {r['mre']:.2f})")
    ax.set_xlabel("landmark index")
    ax.set_ylabel(f"MRE ({report.unit})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_viz(args) -> int:
    from uod import plotting

    t0 = time.time()
    reg, domains = pipeline.load(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    ckpt.check_registry(reg)
    model, _ = pipeline.load_datr(ckpt)
    out = prepare_out(args.out, args.force)
    outputs = {}
    for d, dom in enumerate(domains):
        recs = (dom.test if args.split == "test" else dom.train)[: args.limit]
        preds = pipeline.predict_records(ckpt, recs, d, model)
        for rec in recs:
            err = float(radial_errors(preds[rec.image_id], rec.landmarks.coords).mean())
            path = out / dom.spec.name / f"{rec.image_id}.png"
            plotting.overlay(rec.pixels, preds[rec.image_id], rec.landmarks.coords, path, err, "px",
                             title=rec.image_id)
            outputs[f"{dom.spec.name}/{rec.image_id}"] = path
    print(f"wrote {len(outputs)} overlays under {out}")
    write_manifest(out, args, {"split": args.split, "limit": args.limit}, t0,
                   {"data": args.data, "checkpoint": args.checkpoint}, outputs, seeds=[],
                   consumed={str(args.checkpoint): file_hash(args.checkpoint)})
    return EXIT_OK


def cmd_sweep(args) -> int:
    from uod import plotting

    t0 = time.time()
    reg, domains = pipeline.load(args.data)
    names = [d.spec.name for d in domains]
    target = args.target or names[0]
    if target not in names:
        raise UsageError(f"--target: unknown domain {target!r}")
    t = names.index(target)
    cands = args.candidates or domains[t].splits.train[: args.num_candidates]
    if len(cands) < 2:
        raise UsageError("sweep needs at least 2 one-shot candidates")
    cfg1 = resolve(Stage1Config, args, STAGE1_FLAGS)
    cfg2 = resolve(Stage2Config, argparse.Namespace(config=args.stage2_config), {}) if args.with_stage2 else None
    out = prepare_out(args.out, args.force)
    rows = []
    for seed in args.seeds:
        cfg1.seed = seed
        if cfg2 is not None:
            cfg2.seed = seed
        rows += pipeline.sweep(domains, reg, t, cands, cfg1, cfg2,
                               progress=lambda r: print("{mode} {candidate} seed={seed} mre={mre:.4f}".format(**r),
                                                        flush=True))
    write_rows(out / "sweep.csv", rows, ["mode", "candidate", "seed", "mre"])
    sp = pipeline.spread(rows)
    (out / "spread.json").write_text(json.dumps(sp, indent=2) + "\n")
    plotting.sweep_figure(rows, out / "sweep.png")
    for mode in pipeline.SWEEP_MODES:
        print(f"spread {mode} {sp[mode]:.4f}")
    config = {"target": target, "candidates": list(cands), "stage1": cfg1.to_dict(),
              "stage2": cfg2.to_dict() if cfg2 else None}
    write_manifest(out, args, config, t0, {"data": args.data},
                   {"table": out / "sweep.csv", "spread": out / "spread.json", "figure": out / "sweep.png"},
                   seeds=list(args.seeds))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_stage1_flags(p):
    p.add_argument("--img-size", dest="img_size", type=int, help="working size (default 384)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-5)")
    p.add_argument("--batch", type=int, help="batch size (default 8)")
    p.add_argument("--epochs", type=int, help="epochs (default 1000)")
    p.add_argument("--temperature", type=float, help="softmax temperature on cosine similarity (default 1)")
    p.add_argument("--points-per-patch", dest="points_per_patch", type=int,
                   help="matching targets drawn per patch (default 1)")
    p.add_argument("--frozen-norm-epochs", dest="frozen_norm_epochs", type=int,
                   help="final epochs trained with recalibrated, fixed norm statistics (default 0)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uod", description="Universal one-shot landmark detection pipeline.")
    ap.add_argument("--version", action="version", version=f"uod {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic domains")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--domains", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stage1", help="self-supervised matching training")
    p.add_argument("--data", nargs="+", required=True, help="domain directories (order = domain ids)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    _add_stage1_flags(p)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("label", help="pseudo-label training images from the one-shot template")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oneshot", action="append", metavar="DOMAIN=IMAGE_ID",
                   help="override the one-shot image of a domain (must be a training image)")
    p.add_argument("--tta", type=int, default=0, help="augmented template copies to average")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("stage2", help="supervised training of the domain-adaptive transformer")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--labels", required=True, help="output directory of `uod label`")
    p.add_argument("--stage1", help="stage1 checkpoint to embed (default: from the label manifest)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--img-size", dest="img_size", type=int, help="working size (default 576)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4)")
    p.add_argument("--batch", type=int, help="batch size (default 8)")
    p.add_argument("--epochs", type=int, help="epochs (default 300)")
    p.add_argument("--sigma", type=float, help="heatmap Gaussian sigma (default 3)")
    p.add_argument("--alpha", type=float, help="heatmap exponent base (default 10)")
    p.add_argument("--variant", choices=VARIANTS, help="transformer block variant (default full)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_stage2)

    for name, helptext in (("eval", "score a stage2 checkpoint"), ("viz", "write prediction overlays")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", nargs="+", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", choices=("test", "train"), default="test")
        p.add_argument("--force", action="store_true")
        if name == "eval":
            p.add_argument("--thresholds", default=",".join(fmt_num(t) for t in DEFAULT_THRESHOLDS_MM))
            p.add_argument("--unit", choices=("mm", "px"), default="mm")
            p.set_defaults(func=cmd_eval)
        else:
            p.add_argument("--limit", type=int, default=8, help="images per domain")
            p.set_defaults(func=cmd_viz)

    p = sub.add_parser("sweep", help="single vs universal one-shot robustness sweep")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", help="swept domain name (default: first)")
    p.add_argument("--candidates", nargs="+", help="one-shot candidate ids (default: first training ids)")
    p.add_argument("--num-candidates", type=int, default=5)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--config", help="stage1 config JSON")
    p.add_argument("--with-stage2", action="store_true", help="also train stage2 per candidate")
    p.add_argument("--stage2-config", help="stage2 config JSON for --with-stage2")
    p.add_argument("--force", action="store_true")
    _add_stage1_flags(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, UnitError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DomainError, CheckpointError, MetricError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
