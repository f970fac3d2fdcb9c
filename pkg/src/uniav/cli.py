"""Command-line entry points: synth, train, eval, ablate, plot.

Configs are YAML mirroring the TrainConfig structure ({objectives, epochs,
..., model: {...}, data: {...}}); individual flags override file values.
Exit codes: 0 success, 2 usage error (argparse), 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import yaml

from .data import SyntheticSpec, generate_synthetic
from .errors import ConfigurationError, InputError, UniavError
from .pipeline import (
    ABLATION_AXES,
    CSV_METRICS,
    EVAL_TASKS,
    evaluate,
    run_ablation,
    train,
    train_config_from_dict,
)


def _load_config_dict(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    loaded = yaml.safe_load(p.read_text()) or {}
    if not isinstance(loaded, dict):
        raise ConfigurationError("config file must hold a mapping at the top level")
    return loaded


def _train_config_from_args(args):
    """Config file first, then explicit flags on top."""
    d = _load_config_dict(getattr(args, "config", None))
    model_d = dict(d.get("model", {}))
    data_d = dict(d.get("data", {}))
    if getattr(args, "objectives", None) is not None:
        d["objectives"] = [s.strip() for s in args.objectives.split(",") if s.strip()]
    for attr, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("lr", "learning_rate"), ("alpha", "alpha"),
                      ("seed", "seed"), ("device", "device"),
                      ("val_fraction", "val_fraction")):
        val = getattr(args, attr, None)
        if val is not None:
            d[key] = val
    if getattr(args, "arch", None) is not None:
        model_d["visual_arch"] = args.arch
        model_d["audio_arch"] = args.arch
    if getattr(args, "decoder_depth", None) is not None:
        model_d["decoder_depth"] = args.decoder_depth
    if getattr(args, "image_size", None) is not None:
        model_d["image_size"] = args.image_size
        data_d["image_size"] = args.image_size
    if model_d:
        d["model"] = model_d
    if data_d:
        d["data"] = data_d
    return train_config_from_dict(d)


def _add_train_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--objectives", help="comma list from {cl,mas,mva}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--device", help="torch device (default: $UNIAV_DEVICE, then cpu)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--arch", choices=("compact_cnn", "resnet18_shape"),
                   help="encoder architecture for both streams")
    p.add_argument("--decoder-depth", dest="decoder_depth", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(n_classes=args.classes, samples_per_class=args.per_class,
                         seed=args.seed)
    manifest = Path(args.out) / "manifest.jsonl"
    generate_synthetic(spec, args.out)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    result = train(cfg, args.manifest, args.out, resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    print(f"runlog: {result.runlog_path}")
    return 0


def _cmd_eval(args) -> int:
    tasks = tuple(s.strip() for s in args.tasks.split(",") if s.strip())
    report = evaluate(args.checkpoint, args.manifest, tasks, out_dir=args.out,
                      sep_mask_source=args.mask_source)
    print(report.to_json())
    return 0


def _cmd_ablate(args) -> int:
    base = _train_config_from_args(args)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if not seeds:
        raise InputError("at least one seed is required")
    tasks = tuple(s.strip() for s in args.tasks.split(",") if s.strip())
    rows = run_ablation(args.axis, base, args.manifest, args.eval_manifest,
                        args.out, seeds=seeds, tasks=tasks)
    csv_path = Path(args.out) / f"{args.axis}.csv"
    print(f"rows: {len(rows)}")
    print(f"csv: {csv_path}")
    return 0


def _cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"no rows in {args.csv}")
    axis = rows[0].get("axis", "value")
    labels = list(dict.fromkeys(r["value"] for r in rows))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    written = []
    for metric in CSV_METRICS:
        series = {}
        for label in labels:
            vals = [float(r[metric]) for r in rows
                    if r["value"] == label and r.get(metric, "") not in ("", None)]
            if vals:
                series[label] = vals
        if not series:
            continue
        xs = [label for label in labels if label in series]
        means = [float(np.mean(series[x])) for x in xs]
        lo = [m - min(series[x]) for m, x in zip(means, xs)]
        hi = [max(series[x]) - m for m, x in zip(means, xs)]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.errorbar(range(len(xs)), means, yerr=[lo, hi], marker="o", capsize=3)
        ax.set_xticks(range(len(xs)))
        ax.set_xticklabels(xs, rotation=30, ha="right")
        ax.set_xlabel(axis)
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out / f"{metric}_vs_{axis}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uniav",
        description="Joint audio-visual localization, separation, and recognition.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark corpus")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", dest="per_class", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_knobs(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate one checkpoint on all tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tasks", default=",".join(EVAL_TASKS))
    p.add_argument("--out", help="directory for report.json and per-sample CSV")
    p.add_argument("--mask-source", dest="mask_source", default="model",
                   choices=("model", "ideal", "mixture"),
                   help="separation estimate: decoder, oracle mask, or raw mixture")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid and write a combined CSV")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--eval-manifest", dest="eval_manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0", help="comma list of seeds")
    p.add_argument("--tasks", default=",".join(EVAL_TASKS))
    _add_train_knobs(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="one figure per metric from an ablation CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UniavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
