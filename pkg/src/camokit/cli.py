"""Command-line entry point: ``camokit <verb> --seed N [--config FILE] [--out DIR] ...``.

Every command that writes artifacts also writes ``manifest.json`` into its
output directory with the argv, resolved settings, seed, input and output
paths, tool version and wall-clock time.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    ClassMap, LabeledImage, SceneConfig, load_dataset, overlay_patch_dataset, read_labels, save_dataset,
    stats, synth_dataset, tile, write_labels,
)
from .detector import (
    PATCH_DETECTOR_HYPER, DetectorConfig, DetectorWeights, TrainConfig, patch_detector_config, predict,
    train_detector,
)
from .evaluator import CsvParseError, SweepEntry, f1_report, read_sweep_csv, run_sweep, sweep_to_csv
from .patch_trainer import format_config, init_patch, load_config, parse_config_text, train_patch
from .patcher import ApplyConfig, Patch, apply_patches, format_jitter
from .report import bar_chart, scatter_chart

log = logging.getLogger("camokit")

DATA_ENV = "CAMOKIT_DATA"
CONFIG_DIR = Path(__file__).parent / "configs"


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit status 2."""


# -- helpers ---------------------------------------------------------------------

def _require(path, what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what} path")
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _data_path(args) -> Path:
    data = args.data or os.environ.get(DATA_ENV)
    if data is None:
        raise CliError(f"no dataset given: pass --data or set {DATA_ENV}")
    return _require(data, "dataset")


def _out(args) -> Path:
    if args.out is None:
        raise CliError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args, split=None):
    root = _data_path(args)
    try:
        return load_dataset(root, split if split is not None else args.split)
    except (KeyError, FileNotFoundError, ValueError) as exc:
        raise CliError(f"cannot load dataset {root}: {exc}") from None


def _read_kv(path: Path) -> dict:
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        out[k] = v
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(json.loads(value))
    return value


def _dataclass_from_kv(cls, kv: dict, base=None, source: str = "<config>"):
    base = base or cls()
    kw = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for k, v in kv.items():
        if k in names:
            try:
                kw[k] = _coerce(v, getattr(base, k))
            except (ValueError, json.JSONDecodeError) as exc:
                raise CliError(f"{source}: bad value for {k}: {exc}") from None
    return dataclasses.replace(base, **kw)


def _write_manifest(out: Path, args, inputs: dict, outputs: list, config: dict, started: float) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "seed": args.seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(p) for p in outputs),
        "version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _history_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_patch(path: Path) -> Patch:
    if path.suffix == ".npy":
        pixels = np.load(path).astype(np.float32)
        if pixels.ndim != 3 or pixels.shape[0] != 3 or pixels.shape[1] != pixels.shape[2]:
            raise CliError(f"{path}: expected a (3, P, P) array, got {pixels.shape}")
        return Patch(pixels, path.stem)
    try:
        return Patch.load_png(path)
    except OSError as exc:
        raise CliError(str(exc)) from None


def _library(patch_dir: Path, marked_only: bool = False) -> list:
    """(PatchConfig, extras, Patch) for every ``<name>.cfg`` with a sibling ``.npy`` or ``.png``."""
    entries = []
    for cfg_path in sorted(patch_dir.rglob("*.cfg")):
        try:
            cfg, extras = load_config(cfg_path)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        if marked_only and extras.get("patch_detector_set", "").lower() not in ("1", "true", "yes"):
            continue
        for ext in (".npy", ".png"):
            pixel_path = cfg_path.with_suffix(ext)
            if pixel_path.exists():
                entries.append((cfg, extras, _load_patch(pixel_path)))
                break
        else:
            raise CliError(f"no patch image next to {cfg_path}")
    if not entries:
        raise CliError(f"no patches found under {patch_dir}")
    return entries


def _load_weights(path, what: str) -> DetectorWeights:
    path = _require(path, what)
    try:
        return DetectorWeights.load(path)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(f"cannot load {what} {path}: {exc}") from None


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    t0 = time.time()
    out = _out(args)
    cfg = SceneConfig()
    if args.config:
        cfg = _dataclass_from_kv(SceneConfig, _read_kv(_require(args.config, "config")), source=args.config)
    items = synth_dataset(args.n, args.seed, cfg)
    save_dataset(out, items, ClassMap(), split=args.split)
    _write_manifest(out, args, {}, [out / "dataset.json"], {"n": args.n, "split": args.split,
                                                             "scene": dataclasses.asdict(cfg)}, t0)
    print(f"wrote {len(items)} images to {out}")
    return 0


def cmd_tile(args) -> int:
    t0 = time.time()
    items, classes = _load(args)
    out = _out(args)
    tiles = []
    for item in items:
        for t in tile(item, args.window, args.overlap):
            ox, oy = t.flags["origin"]
            t.source_id = f"{item.source_id}_x{ox}_y{oy}"
            tiles.append(t)
    save_dataset(out, tiles, classes, split=args.split or "all")
    _write_manifest(out, args, {"data": _data_path(args)}, [out / "dataset.json"],
                    {"window": args.window, "overlap": args.overlap}, t0)
    print(f"wrote {len(tiles)} tiles to {out}")
    return 0


def cmd_stats(args) -> int:
    t0 = time.time()
    items, classes = _load(args)
    s = stats(items, classes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["statistic", "value"])
    for k, v in s.rows():
        w.writerow([k, "undefined" if v is None else v])
    print(buf.getvalue(), end="")
    if args.out:
        out = _out(args)
        (out / "stats.csv").write_text(buf.getvalue())
        _write_manifest(out, args, {"data": _data_path(args)}, [out / "stats.csv"], {}, t0)
    return 0


def cmd_train_detector(args) -> int:
    t0 = time.time()
    items, classes = _load(args)
    out = _out(args)
    kv = _read_kv(_require(args.config, "config")) if args.config else {}
    det_cfg = _dataclass_from_kv(DetectorConfig, kv, DetectorConfig(num_classes=len(classes)), args.config or "")
    hyper = _dataclass_from_kv(TrainConfig, kv, TrainConfig(seed=args.seed), args.config or "")
    if args.epochs is not None:
        hyper = dataclasses.replace(hyper, epochs=args.epochs)
    result = train_detector(items, det_cfg, hyper)
    result.weights.save(out / "weights.npz")
    _history_csv(out / "loss.csv", ["epoch", "loss"], enumerate(result.history))
    _write_manifest(out, args, {"data": _data_path(args)}, [out / "weights.npz", out / "loss.csv"],
                    {"detector": dataclasses.asdict(det_cfg), "train": dataclasses.asdict(hyper)}, t0)
    print(f"final loss {result.history[-1]:.4f}; weights in {out / 'weights.npz'}")
    return 0


def cmd_train_patch(args) -> int:
    t0 = time.time()
    weights = _load_weights(args.weights, "detector weights")
    items, _ = _load(args)
    cfg_path = _require(args.config, "patch config")
    try:
        cfg, extras = load_config(cfg_path)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    cfg = dataclasses.replace(cfg, seed=args.seed)
    if cfg.alpha == 0:
        print(f"warning: {cfg.name} has alpha 0; the patch is invisible and will not change", file=sys.stderr)
    out = _out(args)
    init = None
    if cfg.init == "legacy":
        try:
            init = init_patch(cfg)
        except FileNotFoundError as exc:
            raise CliError(str(exc)) from None
    result = train_patch(weights, items, cfg, epochs=args.epochs, init=init)
    np.save(out / f"{cfg.name}.npy", result.patch.pixels)
    result.patch.save_png(out / f"{cfg.name}.png")
    (out / f"{cfg.name}.cfg").write_text(format_config(cfg, extras))
    _history_csv(out / f"{cfg.name}_loss.csv", ["epoch", "adversarial_loss", "total_loss"],
                 zip(range(len(result.history)), result.history, result.total_history))
    outputs = [out / f"{cfg.name}{s}" for s in (".npy", ".png", ".cfg", "_loss.csv")]
    _write_manifest(out, args, {"weights": args.weights, "data": _data_path(args), "config": cfg_path}, outputs,
                    {"patch": dataclasses.asdict(cfg), "extras": extras, "epochs": args.epochs,
                     "best_epoch": result.best_epoch}, t0)
    print(f"{cfg.name}: best epoch {result.best_epoch}, loss {min(result.history):.4f}")
    return 0


def cmd_train_patch_detector(args) -> int:
    t0 = time.time()
    items, _ = _load(args)
    patch_dir = _require(args.patch_dir, "patch directory")
    lib = _library(patch_dir, marked_only=args.marked_only)
    out = _out(args)
    patches = [p for _, _, p in lib]
    apply_cfgs = [c.apply_config() if args.alpha is None else dataclasses.replace(c.apply_config(), alpha=args.alpha)
                  for c, _, _ in lib]
    data = overlay_patch_dataset(items, patches, apply_cfgs, label_mode=args.label_mode, seed=args.seed)
    n_classes = len(patches) if args.label_mode == "per_patch_class" else 1
    det_cfg = patch_detector_config(n_classes)
    hyper = dataclasses.replace(PATCH_DETECTOR_HYPER, seed=args.seed)
    if args.epochs is not None:
        hyper = dataclasses.replace(hyper, epochs=args.epochs)
    result = train_detector(data, det_cfg, hyper)
    result.weights.save(out / "patch_detector.npz")
    _history_csv(out / "loss.csv", ["epoch", "loss"], enumerate(result.history))
    (out / "classes.txt").write_text("".join(f"{c.name}\n" for c, _, _ in lib) if n_classes > 1 else "patch\n")
    _write_manifest(out, args, {"data": _data_path(args), "patch_dir": patch_dir},
                    [out / "patch_detector.npz", out / "loss.csv", out / "classes.txt"],
                    {"patches": [c.name for c, _, _ in lib], "label_mode": args.label_mode,
                     "detector": dataclasses.asdict(det_cfg), "train": dataclasses.asdict(hyper)}, t0)
    print(f"patch detector with {n_classes} class(es) trained on {len(patches)} patches")
    return 0


def cmd_apply(args) -> int:
    t0 = time.time()
    items, classes = _load(args)
    patch = _load_patch(_require(args.patch, "patch"))
    cfg = ApplyConfig(size_fraction=args.size, alpha=args.alpha, seed=args.seed)
    if args.no_jitter:
        cfg = cfg.without_jitter()
    out = _out(args)
    (out / "jitter").mkdir(exist_ok=True)
    rng = np.random.default_rng(args.seed)
    patched = []
    for item in items:
        img, jitter = apply_patches(item.image, item.boxes, patch, dataclasses.replace(cfg, seed=int(rng.integers(2**31))))
        patched.append(LabeledImage(img.data.astype(np.float32), item.boxes, item.source_id))
        (out / "jitter" / f"{item.source_id}.txt").write_text(format_jitter(jitter))
    save_dataset(out, patched, classes, split=args.split or "all")
    _write_manifest(out, args, {"data": _data_path(args), "patch": args.patch}, [out / "dataset.json"],
                    {"apply": dataclasses.asdict(cfg)}, t0)
    print(f"patched {len(patched)} images into {out}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    items, classes = _load(args)
    truths = [it.boxes for it in items]
    if args.predictions:
        pred_dir = _require(args.predictions, "predictions directory")
        preds = []
        for it in items:
            path = pred_dir / f"{it.source_id}.txt"
            try:
                preds.append(read_labels(path) if path.exists() else [])
            except ValueError as exc:
                raise CliError(str(exc)) from None
        inputs = {"data": _data_path(args), "predictions": pred_dir}
    else:
        weights = _load_weights(args.weights, "detector weights")
        dets = predict(weights, [it.image for it in items], args.conf_thresh)
        preds = [[d.box for d in ds] for ds in dets]
        inputs = {"data": _data_path(args), "weights": args.weights}
    report = f1_report(preds, truths, classes, args.iou, n_boot=args.n_boot, seed=args.seed)
    print(report.to_csv(), end="")
    if args.out:
        out = _out(args)
        (out / "eval.csv").write_text(report.to_csv())
        if args.save_predictions:
            (out / "predictions").mkdir(exist_ok=True)
            for it, ps in zip(items, preds):
                write_labels(ps, out / "predictions" / f"{it.source_id}.txt")
        _write_manifest(out, args, inputs, [out / "eval.csv"],
                        {"iou": args.iou, "conf_thresh": args.conf_thresh, "n_boot": args.n_boot}, t0)
    return 0


def cmd_sweep(args) -> int:
    t0 = time.time()
    detector = _load_weights(args.detector, "detector weights")
    patch_detector = _load_weights(args.patch_detector, "patch detector weights")
    items, classes = _load(args)
    patch_dir = _require(args.patch_dir, "patch directory")
    library = [SweepEntry(c.name, p, c.apply_config()) for c, _, p in _library(patch_dir)]
    out = _out(args)
    rep = run_sweep(detector, patch_detector, library, items, classes, seed=args.seed,
                    conf_thresh=args.conf_thresh, workers=args.workers)
    (out / "sweep.csv").write_text(rep.to_csv())
    (out / "correlations.json").write_text(json.dumps(rep.correlations, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, args, {"detector": args.detector, "patch_detector": args.patch_detector,
                                "patch_dir": patch_dir, "data": _data_path(args)},
                    [out / "sweep.csv", out / "correlations.json"],
                    {"conf_thresh": args.conf_thresh, "baseline_mF1": rep.baseline_mf1}, t0)
    print(rep.to_csv(), end="")
    bad = [r.name for r in read_sweep_csv(out / "sweep.csv") if r.detection_score != max(r.mF1_camo, r.F1_patch)]
    if bad:
        print(f"error: detection_score != max(mF1_camo, F1_patch) for {bad}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    t0 = time.time()
    sweep_path = _require(args.sweep, "sweep CSV")
    try:
        rows = read_sweep_csv(sweep_path)
    except CsvParseError as exc:
        raise CliError(str(exc)) from None
    out = _out(args)
    baselines = {r.baseline_mF1 for r in rows if r.baseline_mF1 == r.baseline_mF1}
    baseline = args.baseline if args.baseline is not None else (baselines.pop() if len(baselines) == 1 else None)
    (out / "bars.svg").write_text(bar_chart(rows, baseline))
    (out / "scatter.svg").write_text(scatter_chart(rows))
    _write_manifest(out, args, {"sweep": sweep_path}, [out / "bars.svg", out / "scatter.svg"],
                    {"baseline": baseline}, t0)
    print(f"rendered {len(rows)} patches to {out}")
    return 0


def cmd_configs(args) -> int:
    """List the bundled experiment configs (or copy them with --out)."""
    paths = sorted(CONFIG_DIR.glob("*.cfg"))
    for p in paths:
        cfg, _ = parse_config_text(p.read_text(), str(p))
        print(f"{p.name}\tloss={cfg.loss_kind}\tsize={cfg.size_fraction}\talpha={cfg.alpha}\tgray={cfg.grayscale}")
    if args.out:
        out = _out(args)
        for p in paths:
            (out / p.name).write_text(p.read_text())
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
    common.add_argument("--split", help="dataset split name")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="camokit", description="Adversarial camouflage toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic overhead dataset")
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_synth, split="train")

    p = sub.add_parser("tile", parents=[common], help="cut images into fixed-size windows")
    p.add_argument("--window", type=int, default=416)
    p.add_argument("--overlap", type=int, default=0)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("stats", parents=[common], help="dataset statistics")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-detector", parents=[common], help="train the vehicle detector")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-patch", parents=[common], help="optimize one adversarial patch")
    p.add_argument("--weights", required=True)
    p.add_argument("--epochs", type=int, help="override the configured epoch count (smoke runs)")
    p.set_defaults(func=cmd_train_patch)

    p = sub.add_parser("train-patch-detector", parents=[common], help="train a detector that finds patches")
    p.add_argument("--patch-dir", required=True)
    p.add_argument("--label-mode", choices=("single_class", "per_patch_class"), default="single_class")
    p.add_argument("--marked-only", action="store_true", help="use only configs with patch_detector_set = true")
    p.add_argument("--alpha", type=float, help="overlay every patch at this alpha instead of its own")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_patch_detector)

    p = sub.add_parser("apply", parents=[common], help="paste a patch onto every labeled object")
    p.add_argument("--patch", required=True, help=".npy or .png patch")
    p.add_argument("--size", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--no-jitter", action="store_true")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", parents=[common], help="per-class F1 of a detector or of saved predictions")
    p.add_argument("--weights")
    p.add_argument("--predictions", help="directory of label files (optionally with a confidence column)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf-thresh", type=float, default=0.25)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--save-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="score a patch library with both detectors")
    p.add_argument("--detector", required=True)
    p.add_argument("--patch-detector", required=True)
    p.add_argument("--patch-dir", required=True)
    p.add_argument("--conf-thresh", type=float, default=0.25)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="SVG charts from a sweep CSV")
    p.add_argument("--sweep", required=True)
    p.add_argument("--baseline", type=float)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("configs", parents=[common], help="list or copy the bundled experiment configs")
    p.set_defaults(func=cmd_configs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not (args.weights or args.predictions):
        parser.error("eval needs --weights or --predictions")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
