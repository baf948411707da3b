"""Command-line entry point: ``agetrace {synth,train,sweep,eval,compare-labels}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from . import plotting
from .experiment import (
    DESK_PROFILE,
    ExperimentSpec,
    apply_profile,
    compare_labels,
    evaluate_checkpoint,
    run_experiment,
    sweep_epsilon,
)
from .raster import read_label_png
from .synth import SynthConfig, generate_sequence, write_split

logger = logging.getLogger("agetrace")


def _parse_overrides(items) -> dict:
    """``key=value`` pairs, values parsed as YAML scalars."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        out[key] = yaml.safe_load(value)
    return out


def _spec_from_args(args) -> ExperimentSpec:
    doc = {}
    if args.config:
        doc = yaml.safe_load(Path(args.config).read_text()) or {}
    flags = {
        "variant": args.variant,
        "direction": args.direction,
        "epsilon": args.epsilon,
        "manifest_path": args.manifest,
        "eval_manifest_path": args.eval_manifest,
        "eval_years": args.eval_years,
        "output_dir": args.output_dir,
        "seed": args.seed,
        "base_width": args.base_width,
        "eval_tile_size": args.eval_tile_size,
        "name": args.name,
    }
    doc.update({k: v for k, v in flags.items() if v is not None})
    for key, items in (("pretrain", args.pretrain), ("finetune", args.finetune)):
        if items:
            doc[key] = {**doc.get(key, {}), **_parse_overrides(items)}
    profile = args.profile or doc.pop("profile", None)
    doc.pop("profile", None)
    if profile == "desk":
        doc = apply_profile(doc, DESK_PROFILE)
    return ExperimentSpec.from_dict(doc)


def _add_spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON experiment spec; flags override it")
    p.add_argument("--variant", choices=("pre", "all", "trace"))
    p.add_argument("--direction", choices=("bi", "mono", "mono_past", "mono_future"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--eval-manifest")
    p.add_argument("--eval-years", type=int, nargs="+")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--eval-tile-size", type=int)
    p.add_argument("--name", help="model name used in report rows")
    p.add_argument("--profile", choices=("desk",), help="desk-scale training overrides")
    p.add_argument("--pretrain", nargs="*", metavar="KEY=VALUE", help="pre-training config overrides")
    p.add_argument("--finetune", nargs="*", metavar="KEY=VALUE", help="fine-tuning config overrides")


def _print_table(path: Path) -> None:
    sys.stdout.write(path.read_text())


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_years=args.num_years,
        start_year=args.start_year,
        year_gap=args.year_gap,
        raster_size=args.raster_size,
        seed=args.seed,
        style_drift_rate=args.drift,
        landuse_change_rate=args.change,
        num_patches=args.num_patches,
        anchor=args.anchor if args.anchor in ("middle", "first", "last", "beyond") else int(args.anchor),
    )
    seq = generate_sequence(cfg)
    out = Path(args.output_dir)
    full, train, evl = write_split(seq, out, args.eval_patch)
    churn = [
        {"patch": p, "year": y, "changed_fraction": float(m.mean())}
        for (p, y), m in sorted(seq.changes.items())
    ]
    (out / "churn.json").write_text(json.dumps(churn, indent=2))
    print(f"wrote {len(full.entries)} entries to {out}; train: {out / 'train.json'}, eval: {out / 'eval.json'}")
    return 0


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    run_experiment(spec)
    _print_table(Path(spec.output_dir) / "metrics.csv")
    return 0


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    if spec.variant != "trace":
        raise SystemExit("sweep requires --variant trace")
    sweep_epsilon(spec, args.values, parallel=args.parallel)
    _print_table(Path(spec.output_dir) / "sweep.csv")
    return 0


def cmd_eval(args) -> int:
    evaluate_checkpoint(
        args.checkpoint,
        args.eval_manifest,
        args.output_dir,
        years=args.eval_years,
        tile_size=args.eval_tile_size,
        name=args.name,
    )
    _print_table(Path(args.output_dir) / "metrics.csv")
    return 0


def cmd_compare(args) -> int:
    a, b = read_label_png(args.labels_a), read_label_png(args.labels_b)
    ious, agreement, overlays = compare_labels(a, b)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "consistency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou"])
        for name, v in ious.items():
            w.writerow([name, "-" if v is None else f"{100 * v:.1f}"])
        w.writerow(["agreement", f"{100 * agreement:.1f}"])
    plotting.plot_label_comparison(overlays, ious, out / "consistency.png")
    _print_table(out / "consistency.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agetrace", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic map sequence")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--num-years", type=int, default=7)
    p.add_argument("--start-year", type=int, default=1900)
    p.add_argument("--year-gap", type=int, default=10)
    p.add_argument("--raster-size", type=int, default=512)
    p.add_argument("--num-patches", type=int, default=4)
    p.add_argument("--drift", type=float, default=0.15)
    p.add_argument("--change", type=float, default=0.02)
    p.add_argument("--anchor", default="middle", help="middle|first|last|beyond or a year")
    p.add_argument("--eval-patch")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one experiment (pre / all / trace)")
    _add_spec_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="uncertainty-threshold sweep of trace runs")
    _add_spec_args(p)
    p.add_argument("--values", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    p.add_argument("--parallel", type=int, default=1, help="concurrent runs (separate processes)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint per year")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--eval-years", type=int, nargs="+")
    p.add_argument("--eval-tile-size", type=int, default=1024)
    p.add_argument("--name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-labels", help="per-class consistency of two label rasters")
    p.add_argument("labels_a")
    p.add_argument("labels_b")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
