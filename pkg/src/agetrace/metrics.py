"""Confusion-matrix based IoU / mIoU / OA."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .raster import DEFAULT_SCHEME, IGNORE, LabelRaster

# classes listed in the result tables; UK still counts toward OA
TABLE_CLASSES = ("WL", "GL", "SM", "FW", "SW")
TABLE_COLUMNS = ("model", "year") + TABLE_CLASSES + ("mIoU", "OA")


@dataclass
class ConfusionMatrix:
    num_classes: int = DEFAULT_SCHEME.count
    counts: np.ndarray = None  # rows = ground truth, cols = prediction
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)


def _raw(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelRaster) else np.asarray(x)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair; pixels with gt == -1 are skipped."""
    p, y = _raw(pred), _raw(gt)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    c = cm.num_classes
    valid = y != IGNORE
    yv, pv = y[valid].astype(np.int64), p[valid].astype(np.int64)
    if yv.size and (yv.max() >= c or yv.min() < 0 or pv.min() < 0 or pv.max() >= c):
        raise ValueError("class id out of range")
    counts = np.bincount(yv * c + pv, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(c, cm.counts + counts, cm.ignored + int((~valid).sum()))


def iou(cm: ConfusionMatrix, c: int) -> Optional[float]:
    """TP / (TP + FP + FN), or None when the class never occurs."""
    if not 0 <= c < cm.num_classes:
        raise ValueError(f"invalid class id {c}")
    tp = cm.counts[c, c]
    fp = cm.counts[:, c].sum() - tp
    fn = cm.counts[c, :].sum() - tp
    denom = tp + fp + fn
    if denom == 0:
        return None
    return float(tp) / float(denom)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / total


@dataclass
class MetricReport:
    iou: dict  # class name -> float | None
    miou: Optional[float]
    oa: float
    excluded_classes: set = field(default_factory=set)

    def row(self, model: str, year) -> dict:
        def pct(v):
            return "-" if v is None else f"{100 * v:.1f}"

        out = {"model": model, "year": year}
        for name in TABLE_CLASSES:
            out[name] = "-" if name in self.excluded_classes else pct(self.iou.get(name))
        out["mIoU"] = pct(self.miou)
        out["OA"] = pct(self.oa)
        return out

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            "miou": self.miou,
            "oa": self.oa,
            "excluded_classes": sorted(self.excluded_classes),
        }


def report(
    cm: ConfusionMatrix,
    excluded: Iterable = (),
    names=DEFAULT_SCHEME.names,
    exclude_uk: bool = True,
    exclude_absent: bool = True,
) -> MetricReport:
    """Per-class IoU, mIoU and OA.

    ``excluded`` holds class ids or names left out of mIoU. By default UK and
    classes with no ground-truth pixels are also left out. OA always covers
    every unmasked pixel.
    """
    excl = {names[c] if isinstance(c, (int, np.integer)) else c for c in excluded}
    if exclude_uk and "UK" in names:
        excl.add("UK")
    if exclude_absent:
        gt_counts = cm.counts.sum(axis=1)
        excl |= {names[c] for c in range(cm.num_classes) if gt_counts[c] == 0}
    ious = {names[c]: iou(cm, c) for c in range(cm.num_classes)}
    vals = [v for n, v in ious.items() if n not in excl and v is not None]
    miou = float(np.mean(vals)) if vals else None
    return MetricReport(ious, miou, overall_accuracy(cm), excl)


def write_table(rows: list, csv_path, json_path=None) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in TABLE_COLUMNS})
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=2))


def read_table(csv_path) -> list:
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))
