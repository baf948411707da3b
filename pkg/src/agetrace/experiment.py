"""Experiment driver: Pre / All / Trace training, evaluation, epsilon sweeps."""

from __future__ import annotations

import csv
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import plotting
from .metrics import ConfusionMatrix, TABLE_CLASSES, accumulate, report, write_table
from .pseudo import coverage, generate_pseudo_labels
from .raster import DEFAULT_SCHEME, IGNORE, LabelRaster, load_manifest, read_label_png, write_label_png
from .trace import TraceJournal, TraceState, next_step, select_anchor, training_set
from .train import TrainConfig, TrainLog, finetune_step, predict_scores, pretrain, train_epochs
from .unet import UNetConfig, build_model, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

VARIANTS = ("pre", "all", "trace")
DIRECTIONS = {"bi": "bi", "mono": "mono_past", "mono_past": "mono_past", "mono_future": "mono_future"}

# Desk-scale overrides: small rasters yield few tiles, so the default
# schedules are kept but with smaller tiles and a 10x learning rate.
DESK_PROFILE = {
    "base_width": 16,
    "pretrain": {"tile_size": 128, "overlap": 32, "initial_lr": 1e-3},
    "finetune": {"tile_size": 128, "overlap": 32, "initial_lr": 1e-4},
}


@dataclass
class ExperimentSpec:
    variant: str = "trace"
    direction: str = "bi"
    epsilon: float = 0.8
    manifest_path: str = ""
    eval_manifest_path: Optional[str] = None
    eval_years: Optional[list] = None
    output_dir: str = "runs/experiment"
    seed: int = 0
    base_width: int = 64
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    eval_tile_size: int = 1024
    eval_overlap: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}")
        if self.variant == "trace" and not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if not self.manifest_path:
            raise ValueError("manifest_path is required")

    @property
    def model_name(self) -> str:
        if self.name:
            return self.name
        tag = "mono" if self.direction.startswith("mono") else "bi"
        return f"{self.variant.capitalize()}_{tag}"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"profile"}
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        d = dict(d)
        if d.pop("profile", None) == "desk":
            d = apply_profile(d, DESK_PROFILE)
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        import yaml

        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def apply_profile(d: dict, profile: dict) -> dict:
    """Fill spec fields from a profile without overriding explicit values."""
    out = dict(d)
    for k, v in profile.items():
        if isinstance(v, dict):
            out[k] = {**v, **out.get(k, {})}
        else:
            out.setdefault(k, v)
    return out


# --------------------------------------------------------------------------
# data access


class SequenceData:
    """Sheets and anchor labels of every training patch, loaded once."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.patches = [p for p in manifest.patches if p in manifest.anchor_label_year]
        if not self.patches:
            raise ValueError("no patch in the manifest declares an anchor_label_year")
        self.entries = {p: manifest.for_patch(p) for p in self.patches}
        self.years = {p: tuple(e.year for e in self.entries[p]) for p in self.patches}
        self._sheets: dict = {}
        self.anchor = {}
        self.gt = {}
        for p in self.patches:
            a_y = manifest.anchor_label_year[p]
            self.anchor[p] = select_anchor(self.years[p], a_y)
            self.gt[p] = manifest.load_label(manifest.entry(p, a_y))

    def sheet(self, patch: str, index: int):
        key = (patch, index)
        if key not in self._sheets:
            self._sheets[key] = self.manifest.load_sheet(self.entries[patch][index])
        return self._sheets[key]

    def anchor_is_labeled(self, patch: str) -> bool:
        return self.years[patch][self.anchor[patch]] == self.manifest.anchor_label_year[patch]

    def gt_for(self, patch: str, index: int) -> LabelRaster:
        """The anchor-year ground truth re-stamped for map ``index``."""
        sheet = self.sheet(patch, index)
        y = self.gt[patch]
        if y.shape != sheet.shape:
            raise ValueError(f"anchor label of {patch} does not match map {sheet.year}")
        return LabelRaster(y.labels, sheet.year, patch, y.scheme)


def _train_configs(spec: ExperimentSpec) -> tuple:
    pre = TrainConfig.pretrain_defaults(**{"seed": spec.seed, **spec.pretrain})
    ft = TrainConfig.finetune_defaults(**{"seed": spec.seed, **spec.finetune})
    return pre, ft


def _pseudo_label(model, sheet, spec: ExperimentSpec) -> LabelRaster:
    scores = predict_scores(model, sheet, tile_size=spec.eval_tile_size, overlap=spec.eval_overlap)
    return generate_pseudo_labels(scores, spec.epsilon, sheet.year, sheet.patch_id)


def _pseudo_path(out: Path, patch: str, year: int) -> Path:
    return out / "pseudo" / f"{patch}_{year}.png"


# --------------------------------------------------------------------------
# training phases


def _pretrained_model(spec, data: SequenceData, cfg: TrainConfig, out: Path, log: TrainLog):
    ckpt = out / "pretrain.ckpt"
    if ckpt.exists():
        logger.info("resuming from %s", ckpt)
        return load_checkpoint(ckpt)[0]
    torch.manual_seed(spec.seed)
    model = build_model(UNetConfig(base_width=spec.base_width), seed=spec.seed)
    pairs = [(data.sheet(p, data.anchor[p]), data.gt_for(p, data.anchor[p])) for p in data.patches]
    pretrain(model, pairs, cfg, checkpoint=ckpt, log=log)
    return model


def _train_all(model, spec, data: SequenceData, cfg: TrainConfig, out: Path, log: TrainLog):
    ckpt = out / "all.ckpt"
    if ckpt.exists():
        return load_checkpoint(ckpt)[0]
    pairs = [
        (data.sheet(p, k), data.gt_for(p, k)) for p in data.patches for k in range(len(data.years[p]))
    ]
    losses = train_epochs(model, pairs, replace(cfg, phase="all"), trace_step=-1, log=log)
    save_checkpoint(ckpt, model, phase="all", losses=losses)
    return model


def _restore_labels(out: Path, data: SequenceData, state: TraceState, patch: str) -> dict:
    labels = {}
    for k, src in state.label_sources.items():
        if src == "gt":
            labels[k] = data.gt_for(patch, k)
        else:
            year = state.years[k]
            labels[k] = LabelRaster(read_label_png(_pseudo_path(out, patch, year)), year, patch)
    return labels


def _trace(model, spec, data: SequenceData, ft: TrainConfig, out: Path, log: TrainLog):
    mode = DIRECTIONS[spec.direction]
    journal = TraceJournal(out / "trace.json")

    if journal.last is not None:
        rec = journal.last
        states = {p: TraceState.from_dict(d) for p, d in rec["states"].items()}
        labels = {p: _restore_labels(out, data, states[p], p) for p in data.patches}
        model = load_checkpoint(out / rec["checkpoint"])[0]
        step = rec["step"]
        logger.info("resuming trace after step %d", step)
    else:
        states, labels = {}, {}
        for p in data.patches:
            i = data.anchor[p]
            states[p] = TraceState(data.years[p], i, mode)
            if data.anchor_is_labeled(p):
                labels[p] = {i: data.gt_for(p, i)}
                states[p].label_sources[i] = "gt"
            else:
                lab = _pseudo_label(model, data.sheet(p, i), spec)
                write_label_png(_pseudo_path(out, p, lab.year), lab.labels)
                labels[p] = {i: lab}
                states[p].label_sources[i] = "pseudo@pretrain"
        step = None

    while True:
        if step is None:
            step, new = 0, {p: {data.anchor[p]} for p in data.patches}
        else:
            new = {}
            for p in data.patches:
                added, states[p] = next_step(states[p])
                if added:
                    new[p] = added
            if not new:
                break
            step += 1
            for p, added in new.items():
                for k in sorted(added):
                    lab = _pseudo_label(model, data.sheet(p, k), spec)
                    write_label_png(_pseudo_path(out, p, lab.year), lab.labels)
                    labels[p][k] = lab
                    states[p].label_sources[k] = f"pseudo@step{step - 1}"

        pairs = []
        for p in data.patches:
            sheets = {k: data.sheet(p, k) for k in states[p].active}
            pairs += training_set(states[p], sheets, labels[p])
        ckpt_name = f"step{step}.ckpt"
        finetune_step(model, pairs, ft, trace_step=step, checkpoint=out / ckpt_name, log=log)
        journal.append(
            {
                "step": step,
                "checkpoint": ckpt_name,
                "new": {p: sorted(int(k) for k in ks) for p, ks in new.items()},
                "active": {p: sorted(states[p].active) for p in data.patches},
                "label_sources": {
                    p: {str(states[p].years[k]): v for k, v in sorted(states[p].label_sources.items())}
                    for p in data.patches
                },
                "coverage": {
                    p: {str(states[p].years[k]): coverage(labels[p][k]) for k in sorted(ks)}
                    for p, ks in new.items()
                },
                "states": {p: states[p].to_dict() for p in data.patches},
            }
        )
    return model


# --------------------------------------------------------------------------
# evaluation


def evaluate(model, eval_manifest, years=None, tile_size: int = 1024, overlap: int = 0, model_name: str = "model"):
    """Per-year metric reports over every labeled map of ``eval_manifest``."""
    cms: dict = {}
    for e in eval_manifest.entries:
        if e.image is None or e.label is None:
            continue
        if years is not None and e.year not in years:
            continue
        sheet = eval_manifest.load_sheet(e)
        gt = eval_manifest.load_label(e)
        pred = predict_scores(model, sheet, tile_size=tile_size, overlap=overlap).argmax(axis=-1)
        cms[e.year] = accumulate(cms.get(e.year, ConfusionMatrix(DEFAULT_SCHEME.count)), pred, gt)
    reports = {y: report(cm) for y, cm in sorted(cms.items())}
    rows = [r.row(model_name, y) for y, r in reports.items()]
    return reports, rows


def _write_metrics(out: Path, reports: dict, rows: list, model_name: str) -> None:
    write_table(rows, out / "metrics.csv")
    doc = {"model": model_name, "rows": rows, "reports": {str(y): r.to_dict() for y, r in reports.items()}}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2))
    plotting.plot_year_metrics(reports, out / "figures" / "metrics.png", title=model_name)


def run_experiment(spec: ExperimentSpec) -> dict:
    """Train one model variant, evaluate it per year, write all artifacts.

    Interrupted runs resume from the checkpoints and trace journal found in
    ``spec.output_dir``.
    """
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    manifest = load_manifest(spec.manifest_path)
    data = SequenceData(manifest)
    pre_cfg, ft_cfg = _train_configs(spec)
    (out / "run.json").write_text(
        json.dumps(
            {
                "model": spec.model_name,
                "pretrain": pre_cfg.to_dict(),
                "finetune": ft_cfg.to_dict(),
                "anchor_tie_rule": "earlier year",
                "anchors": {
                    p: {
                        "index": data.anchor[p],
                        "map_year": data.years[p][data.anchor[p]],
                        "label_year": manifest.anchor_label_year[p],
                    }
                    for p in data.patches
                },
            },
            indent=2,
        )
    )
    log = TrainLog(out / "log.csv")

    model = _pretrained_model(spec, data, pre_cfg, out, log)
    if spec.variant == "all":
        model = _train_all(model, spec, data, pre_cfg, out, log)
    elif spec.variant == "trace":
        model = _trace(model, spec, data, ft_cfg, out, log)

    eval_manifest = load_manifest(spec.eval_manifest_path) if spec.eval_manifest_path else manifest
    reports, rows = evaluate(
        model, eval_manifest, spec.eval_years, spec.eval_tile_size, spec.eval_overlap, spec.model_name
    )
    _write_metrics(out, reports, rows, spec.model_name)
    return reports


def evaluate_checkpoint(checkpoint, eval_manifest_path, output_dir, years=None, tile_size=1024, overlap=0, name=None) -> dict:
    model = load_checkpoint(checkpoint)[0]
    name = name or Path(checkpoint).stem
    reports, rows = evaluate(model, load_manifest(eval_manifest_path), years, tile_size, overlap, name)
    _write_metrics(Path(output_dir), reports, rows, name)
    return reports


# --------------------------------------------------------------------------
# epsilon sweep


SWEEP_COLUMNS = ("epsilon", "year", "mIoU", "OA") + TABLE_CLASSES
COVERAGE_COLUMNS = ("epsilon", "step", "patch", "year", "coverage")


def _sweep_one(spec_dict: dict) -> dict:
    return run_experiment(ExperimentSpec(**spec_dict))


def sweep_epsilon(spec: ExperimentSpec, values, parallel: int = 1) -> list:
    """One full trace run per epsilon; writes ``sweep.csv`` and plots.

    Pre-training does not depend on epsilon, so the first run's pretrained
    checkpoint is shared with the others.
    """
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no epsilon values given")
    if spec.variant != "trace":
        raise ValueError("epsilon sweeps need variant=trace")
    root = Path(spec.output_dir)
    subs = [replace(spec, epsilon=v, output_dir=str(root / f"eps_{v:.2f}")) for v in values]

    first = subs[0]
    pre_ckpt = Path(first.output_dir) / "pretrain.ckpt"
    if not pre_ckpt.exists():
        Path(first.output_dir).mkdir(parents=True, exist_ok=True)
        data = SequenceData(load_manifest(first.manifest_path))
        pre_cfg, _ = _train_configs(first)
        _pretrained_model(first, data, pre_cfg, Path(first.output_dir), TrainLog(Path(first.output_dir) / "log.csv"))
    for s in subs[1:]:
        dst = Path(s.output_dir) / "pretrain.ckpt"
        if not dst.exists():
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(pre_ckpt, dst)
            shutil.copyfile(Path(first.output_dir) / "log.csv", Path(s.output_dir) / "log.csv")

    if parallel > 1:
        with ProcessPoolExecutor(parallel) as pool:
            results = list(pool.map(_sweep_one, [s.to_dict() for s in subs]))
    else:
        results = [run_experiment(s) for s in subs]

    table, cov_rows = [], []
    for s, reports in zip(subs, results):
        for year, r in reports.items():
            row = {"epsilon": s.epsilon, "year": year, "mIoU": r.miou, "OA": r.oa}
            row.update({c: r.iou.get(c) for c in TABLE_CLASSES})
            table.append(row)
        journal = TraceJournal(Path(s.output_dir) / "trace.json")
        for rec in journal.records:
            for p, per_year in rec["coverage"].items():
                for year, cov in per_year.items():
                    cov_rows.append(
                        {"epsilon": s.epsilon, "step": rec["step"], "patch": p, "year": int(year), "coverage": cov}
                    )

    _write_rows(root / "sweep.csv", SWEEP_COLUMNS, table)
    _write_rows(root / "sweep_coverage.csv", COVERAGE_COLUMNS, cov_rows)
    plotting.plot_sweep(table, root / "figures")
    return table


def _write_rows(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in columns})


# --------------------------------------------------------------------------
# label comparison


def compare_labels(labels_a, labels_b, names=DEFAULT_SCHEME.names) -> tuple:
    """Per-class IoU between two label sources plus colour overlays.

    Returns ``(ious, agreement, overlays)`` where ``overlays[name]`` is an
    ``H x W x 3`` uint8 raster: green = a only, red = b only, yellow = both.
    Pixels marked -1 in either source are skipped.
    """
    a = labels_a.labels if isinstance(labels_a, LabelRaster) else np.asarray(labels_a)
    b = labels_b.labels if isinstance(labels_b, LabelRaster) else np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    valid = (a != IGNORE) & (b != IGNORE)
    ious, overlays = {}, {}
    for c, name in enumerate(names):
        in_a = (a == c) & valid
        in_b = (b == c) & valid
        union = np.count_nonzero(in_a | in_b)
        ious[name] = None if union == 0 else np.count_nonzero(in_a & in_b) / union
        ov = np.full(a.shape + (3,), 255, dtype=np.uint8)
        ov[in_a & ~in_b] = (0, 170, 0)
        ov[in_b & ~in_a] = (220, 0, 0)
        ov[in_a & in_b] = (240, 210, 0)
        overlays[name] = ov
    n = np.count_nonzero(valid)
    agreement = float(np.count_nonzero((a == b) & valid)) / n if n else 0.0
    return ious, agreement, overlays
