"""Command-line pipeline: gen, train, eval, analyze, report, all.

Configuration is resolved as built-in defaults, then a YAML file
(``--config``), then command-line flags; later sources win. Every stage
writes into one run directory (``--out``)::

    <out>/data/       images/*.png, manifest.csv
    <out>/train/      best.ckpt, last.ckpt, metrics.csv, timing.csv
    <out>/eval/       predictions.csv, rho.json
    <out>/analysis/   one CSV per statistic, summary.json
    <out>/report/     one SVG per figure
    <out>/run_manifest.json

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import fields as dc_fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import yaml

from . import __version__
from . import analysis as an
from .report import FigureSpec, ReportError, render
from .synthgen import REFERENCE_SIZE, GenConfig, GenerationError, generate_dataset, read_manifest
from .targets import TASK_DIMS, denormalize, tasks_for_variant
from .trainer import (
    ContractError,
    LineDataset,
    TrainConfig,
    TrainingError,
    fit,
    predict,
    read_metrics,
    task_correlations,
)
from .vitmodel import ConfigError, ModelConfig, load_checkpoint

log = logging.getLogger("linevit")

STAGES = ("gen", "train", "eval", "analyze", "report")
MANIFEST_NAME = "run_manifest.json"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "variant": "II",
    "out": "run",
    "device_threads": None,
    "gen": {"n": 2000, "image_size": 64, "workers": 1},
    "model": {},
    "train": {},
    "analysis": {"angle_bin_width": 10.0, "hexbin_gridsize": 20, "clusters": 4,
                 "smooth_window": 5, "min_prominence": None, "jump_window": 3, "min_jump": 0.1},
}

# wall-clock content that cannot be reproduced; kept out of the stage hashes
VOLATILE_FILES = {"train/timing.csv"}
VOLATILE_COLUMNS = {"train/metrics.csv": ("inference_ms",)}


class UsageError(Exception):
    pass


# configuration ---------------------------------------------------------------


def deep_merge(base: Mapping, over: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise UsageError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping at the top level")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = deep_merge(DEFAULTS, load_config_file(getattr(args, "config", None)))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.variant is not None:
        cfg["variant"] = args.variant
    if args.n is not None:
        cfg["gen"]["n"] = args.n
    if args.out is not None:
        cfg["out"] = args.out
    if args.epochs is not None:
        cfg["train"]["max_epochs"] = args.epochs
    if args.device_threads is not None:
        cfg["device_threads"] = args.device_threads
    if cfg["variant"] not in ("I", "II", "III", "IV"):
        raise UsageError(f"invalid variant {cfg['variant']!r}")
    return cfg


def _known(cls, d: Mapping, section: str) -> dict:
    names = {f.name for f in dc_fields(cls)}
    bad = set(d) - names
    if bad:
        raise UsageError(f"unknown {section} settings {sorted(bad)}")
    return dict(d)


def model_config(cfg: Mapping) -> ModelConfig:
    m = _known(ModelConfig, cfg["model"], "model")
    m.setdefault("image_size", cfg["gen"]["image_size"])
    m["variant"] = cfg["variant"]
    try:
        return ModelConfig(**m)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def train_config(cfg: Mapping) -> TrainConfig:
    t = _known(TrainConfig, cfg["train"], "train")
    t["seed"] = cfg["seed"]
    if cfg.get("device_threads"):
        t["threads"] = cfg["device_threads"]
    try:
        return TrainConfig(**t)
    except ValueError as e:
        raise UsageError(str(e)) from e


# run manifest ----------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def content_hash(root: Path, rel: str) -> str:
    """sha256 of a stage output; volatile CSV columns are dropped first."""
    raw = (root / rel).read_bytes()
    drop = VOLATILE_COLUMNS.get(rel)
    if not drop:
        return _sha256(raw)
    rows = list(csv.reader(io.StringIO(raw.decode("utf-8"))))
    keep = [i for i, c in enumerate(rows[0]) if c not in drop]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([r[i] for i in keep])
    return _sha256(buf.getvalue().encode("utf-8"))


def stage_outputs(root: Path, stage_dir: str) -> tuple[dict[str, str], list[str]]:
    base = root / stage_dir
    hashes, volatile = {}, []
    for p in sorted(base.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root).as_posix()
        if rel in VOLATILE_FILES:
            volatile.append(rel)
            continue
        hashes[rel] = content_hash(root, rel)
    return hashes, volatile


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def record_stage(cfg: Mapping, stage: str, stage_dir: str, started: str) -> dict:
    root = Path(cfg["out"])
    path = root / MANIFEST_NAME
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(tool="linevit", version=__version__, config=cfg)
    outputs, volatile = stage_outputs(root, stage_dir)
    manifest.setdefault("stages", {})[stage] = {
        "outputs": outputs, "volatile": volatile, "started": started, "finished": _now(),
    }
    manifest["stages"] = {k: manifest["stages"][k] for k in STAGES if k in manifest["stages"]}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def stage_hashes(manifest_path: str | Path) -> dict[str, dict[str, str]]:
    m = json.loads(Path(manifest_path).read_text())
    return {s: v["outputs"] for s, v in m["stages"].items()}


# stages ----------------------------------------------------------------------


def _dirs(cfg):
    root = Path(cfg["out"])
    return root, root / "data", root / "train", root / "eval", root / "analysis", root / "report"


def cmd_gen(cfg: dict) -> Path:
    started = _now()
    root, data, *_ = _dirs(cfg)
    g = cfg["gen"]
    try:
        gc = GenConfig(cfg["variant"], int(g["n"]), int(cfg["seed"]), data, int(g["image_size"]), workers=int(g["workers"]))
    except ValueError as e:
        raise UsageError(str(e)) from e
    # images left over from an earlier, larger run would break the stage hash
    for stale in sorted((data / "images").glob("Image*.png")) if (data / "images").is_dir() else []:
        stale.unlink()
    manifest = generate_dataset(gc)
    print(f"generated {g['n']} images in {data}")
    record_stage(cfg, "gen", "data", started)
    return manifest


def cmd_train(cfg: dict, checkpoint: str | None = None):
    started = _now()
    _, data, train, *_ = _dirs(cfg)
    mc, tc = model_config(cfg), train_config(cfg)
    res = fit(data, mc, tc, train, resume=checkpoint)
    last = res.metrics[-1] if res.metrics else None
    if last:
        print(f"trained {len(res.metrics)} epochs; final val loss {last.val_loss:.6f}; best checkpoint {res.best_checkpoint}")
    record_stage(cfg, "train", "train", started)
    return res


def prediction_columns(tasks: Sequence[str]) -> list[str]:
    cols = ["image_id"]
    for t in tasks:
        suffix = [""] if TASK_DIMS[t] == 1 else [f"_{j}" for j in range(TASK_DIMS[t])]
        for s in suffix:
            cols += [f"true_{t}{s}", f"pred_{t}{s}"]
    return cols


def read_predictions(path) -> tuple[list[dict], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        return list(rd), list(rd.fieldnames or [])


def rho_from_predictions(path, tasks: Sequence[str]) -> dict[str, float]:
    """Per-task Pearson rho recomputed from a predictions CSV."""
    rows, _ = read_predictions(path)
    out = {}
    for t in tasks:
        comps = [""] if TASK_DIMS[t] == 1 else [f"_{j}" for j in range(TASK_DIMS[t])]
        vals = []
        for c in comps:
            y = [float(r[f"true_{t}{c}"]) for r in rows]
            p = [float(r[f"pred_{t}{c}"]) for r in rows]
            try:
                vals.append(an.pearson(p, y))
            except an.UndefinedCorrelation:
                vals.append(float("nan"))
        out[t] = float(np.mean(vals))
    return out


def cmd_eval(cfg: dict, checkpoint: str | None = None) -> dict[str, float]:
    """Predict the held-out split and write normalised and physical values per image."""
    started = _now()
    _, data, train, ev, *_ = _dirs(cfg)
    ckpt = Path(checkpoint) if checkpoint else train / "best.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found; run train first")
    model, _, _ = load_checkpoint(ckpt)
    variant = model.cfg.variant
    tc = train_config(cfg)
    ds = LineDataset.load(data, variant)
    if ds.image_size != model.cfg.image_size:
        raise ContractError(f"images are {ds.image_size}px but checkpoint expects {model.cfg.image_size}px")
    _, val_idx = ds.split(tc.seed, tc.val_fraction)
    preds = predict(model, ds.images[val_idx], tc.batch_size)
    targets = {k: v.numpy() for k, v in ds.targets(val_idx, torch.float64).items()}
    tasks = list(tasks_for_variant(variant))
    fields, clamped = denormalize(preds, variant, ds.image_size)
    recs = [ds.records[i] for i in val_idx]
    true_ang = np.array([r.angle_deg for r in recs])
    err = an.circular_angle_error(fields["angle_deg"], true_ang)

    ev.mkdir(parents=True, exist_ok=True)
    cols = prediction_columns(tasks) + ["angle_deg", "pred_angle_deg", "angle_error_deg", "length", "width",
                                        "noise_level", "color_name", "clamped"]
    with open(ev / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, r in enumerate(recs):
            row = [r.image_id]
            for t in tasks:
                for j in range(TASK_DIMS[t]):
                    row += [repr(float(targets[t][i, j])), repr(float(preds[t][i, j]))]
            row += [repr(r.angle_deg), repr(float(fields["angle_deg"][i])), repr(float(err[i])), repr(r.length),
                    r.width, repr(r.noise_level), r.color_name, int(bool(clamped[i]))]
            w.writerow(row)
    rho = task_correlations(preds, targets)
    (ev / "rho.json").write_text(json.dumps({t: rho[t] for t in tasks}, indent=2, sort_keys=True) + "\n")
    for t in tasks:
        print(f"rho_{t} {rho[t]!r}")
    print(f"median angle error {float(np.median(err)):.4f} deg over {len(recs)} held-out images")
    record_stage(cfg, "eval", "eval", started)
    return {t: rho[t] for t in tasks}


def _write_rows(path: Path, rows: Sequence[Mapping]) -> None:
    if not rows:
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c])
                        for c in cols])


def _read_rows(path: Path) -> list[dict]:
    """CSV rows with numeric-looking cells converted; empty cells become None."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            conv = {}
            for k, v in row.items():
                if v == "":
                    conv[k] = None
                    continue
                try:
                    conv[k] = int(v)
                except ValueError:
                    try:
                        conv[k] = float(v)
                    except ValueError:
                        conv[k] = v
            out.append(conv)
    return out


def statistics_for(variant: str) -> list[str]:
    """Statistic tables produced for each dataset variant."""
    stats = ["angle_profile", "noise_groups", "loss_curve", "correlation_dynamics"]
    if variant != "I":
        stats += ["length_bins", "length_hexbin"]
    if variant in ("III", "IV"):
        stats.append("width_groups")
    if variant == "IV":
        stats += ["color_groups", "color_clusters"]
    return stats


def cmd_analyze(cfg: dict) -> dict[str, Path]:
    started = _now()
    root, data, train, ev, out, _ = _dirs(cfg)
    a = cfg["analysis"]
    rows, _ = read_predictions(ev / "predictions.csv")
    if not rows:
        raise ContractError("predictions.csv is empty")
    variant = cfg["variant"]
    image_size = int(cfg["gen"]["image_size"])
    out.mkdir(parents=True, exist_ok=True)
    true_ang = np.array([float(r["angle_deg"]) for r in rows])
    err = np.array([float(r["angle_error_deg"]) for r in rows])
    # lengths are reported in reference-canvas pixels so bins match the 20-100 px protocol
    length_ref = np.array([float(r["length"]) for r in rows]) * REFERENCE_SIZE / image_size
    written: dict[str, Path] = {}

    def emit(name, table):
        p = out / f"{name}.csv"
        _write_rows(p, table)
        written[name] = p

    emit("angle_profile", [b.as_row() for b in an.angle_bin_profile(true_ang, err, a["angle_bin_width"])])
    emit("noise_groups", [g.as_row() for g in an.group_stats([float(r["noise_level"]) for r in rows], err)])
    summary: dict[str, Any] = {"n": len(rows), "median_angle_error": float(np.median(err)),
                               "mean_angle_error": float(np.mean(err)), "variant": variant}
    if variant != "I":
        bins = an.length_bin_stats(np.clip(length_ref, 20.0, 100.0), err)
        emit("length_bins", [b.as_row() for b in bins])
        hb = an.hexbin(np.column_stack([length_ref, err]), (20.0, 100.0, 0.0, 180.0), int(a["hexbin_gridsize"]))
        emit("length_hexbin", hb.as_rows())
        summary["hexbin"] = {"hex_width": hb.hex_width, "row_height": hb.row_height}
        summary["length_bin_medians"] = {b.label: b.median for b in bins}
    if variant in ("III", "IV"):
        emit("width_groups", [g.as_row() for g in an.group_stats([int(r["width"]) for r in rows], err)])
    if variant == "IV":
        cg = an.group_stats([r["color_name"] for r in rows], err)
        emit("color_groups", [g.as_row() for g in cg])
        p75 = {g.key: g.p75 for g in cg}
        km = an.kmeans_1d(p75, min(int(a["clusters"]), len(p75)))
        emit("color_clusters", km.as_rows(p75))
        summary["color_cluster_wcss"] = km.wcss

    metrics = read_metrics(train / "metrics.csv")
    tasks = list(tasks_for_variant(variant))
    emit("loss_curve", [{"epoch": int(m["epoch"]), "train_loss": m["train_loss"], "val_loss": m["val_loss"],
                         "lr": m["lr"]} for m in metrics])
    events: list = []
    if len(metrics) > int(a["smooth_window"]):
        dyn = an.correlation_dynamics(metrics, tasks, int(a["jump_window"]), int(a["smooth_window"]),
                                      a["min_prominence"], float(a["min_jump"]))
        events = dyn.events
        dyn_rows = [{"event_epoch": j.event_epoch, "task": j.task, "jump_epoch": j.jump_epoch, "jump": j.jump,
                     "flagged": int(j.flagged)} for j in dyn.alignments]
    else:
        dyn_rows = []
    _write_rows(out / "phase_events.csv", [{"epoch": e.epoch, "prominence": e.prominence, "height": e.height}
                                           for e in events] or [])
    if events:
        written["phase_events"] = out / "phase_events.csv"
    if dyn_rows:
        emit("correlation_dynamics", dyn_rows)
    summary["phase_events"] = [e.epoch for e in events]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(written)} statistic tables to {out}")
    record_stage(cfg, "analyze", "analysis", started)
    return written


FIGURES = {
    "angle_profile": ("polar_profile", "angle error by orientation"),
    "length_bins": ("binned_box", "angle error by line length"),
    "length_hexbin": ("hexbin", "angle error vs line length"),
    "noise_groups": ("group_bars", "angle error by noise level"),
    "width_groups": ("group_bars", "angle error by line width"),
    "color_groups": ("group_bars", "angle error by colour"),
    "color_clusters": ("cluster_pie", "colour clusters by p75 error"),
    "loss_curve": ("loss_curves", "training and validation loss"),
}


def cmd_report(cfg: dict) -> list[Path]:
    started = _now()
    *_, stats, rep = _dirs(cfg)
    variant = cfg["variant"]
    rep.mkdir(parents=True, exist_ok=True)
    summary = json.loads((stats / "summary.json").read_text())
    events = [{"epoch": e} for e in summary.get("phase_events", [])]
    written = []
    for name, (kind, title) in FIGURES.items():
        path = stats / f"{name}.csv"
        if name not in statistics_for(variant) or not path.exists():
            continue
        style = dict(summary.get("hexbin", {})) if kind == "hexbin" else {}
        spec = FigureSpec(kind, f"{title} (dataset {variant})", style=style,
                          labels={"x": "length (px)"} if kind == "binned_box" else {})
        rows = _read_rows(path)
        if kind == "group_bars":
            for r in rows:
                r["group"] = str(r["group"])
        svg = render(spec, rows, events if kind == "loss_curves" else ())
        target = rep / spec.filename(f"{variant}_{name}")
        target.write_text(svg, encoding="utf-8")
        written.append(target)
    print(f"wrote {len(written)} figures to {rep}")
    record_stage(cfg, "report", "report", started)
    return written


def cmd_all(cfg: dict, checkpoint: str | None = None) -> Path:
    cmd_gen(cfg)
    cmd_train(cfg, checkpoint)
    cmd_eval(cfg)
    cmd_analyze(cfg)
    cmd_report(cfg)
    return Path(cfg["out"]) / MANIFEST_NAME


# entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=("I", "II", "III", "IV"))
    common.add_argument("--n", type=int, help="number of images to generate")
    common.add_argument("--out", help="run directory")
    common.add_argument("--checkpoint", help="train: resume from; eval: weights to evaluate")
    common.add_argument("--epochs", type=int, help="maximum training epochs")
    common.add_argument("--device-threads", type=int, dest="device_threads", help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="linevit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"linevit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        if cfg.get("device_threads"):
            torch.set_num_threads(int(cfg["device_threads"]))
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "gen":
            cmd_gen(cfg)
        elif cmd == "train":
            cmd_train(cfg, args.checkpoint)
        elif cmd == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif cmd == "analyze":
            cmd_analyze(cfg)
        elif cmd == "report":
            cmd_report(cfg)
        else:
            cmd_all(cfg, args.checkpoint)
    except UsageError as e:
        print(f"linevit: error: {e}", file=sys.stderr)
        return 2
    except (GenerationError, TrainingError, ContractError, an.ContractError, ReportError,
            FileNotFoundError, OSError, ValueError, KeyError) as e:
        print(f"linevit: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
