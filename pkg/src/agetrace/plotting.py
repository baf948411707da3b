"""Static report figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import TABLE_CLASSES  # noqa: E402

CLASS_COLORS = {
    "WL": "#2e7d32",
    "GL": "#9ccc65",
    "SM": "#c62828",
    "FW": "#1565c0",
    "SW": "#4fc3f7",
    "UK": "#757575",
}

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
        "savefig.bbox": "tight",
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_year_metrics(reports: dict, path, title: str = "") -> Path:
    """Per-class IoU (dashed) and mIoU / OA (solid) against map year."""
    years = sorted(reports)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name in TABLE_CLASSES:
        vals = []
        for y in years:
            v = reports[y].iou.get(name)
            vals.append(np.nan if v is None or name in reports[y].excluded_classes else 100 * v)
        ax.plot(years, vals, "--", color=CLASS_COLORS[name], lw=1, label=name)
    ax.plot(years, [np.nan if reports[y].miou is None else 100 * reports[y].miou for y in years], "-", color="k", lw=2, label="mIoU")
    ax.plot(years, [100 * reports[y].oa for y in years], "-", color="#8d6e63", lw=2, label="OA")
    ax.set_xlabel("map year")
    ax.set_ylabel("%")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend(ncol=4, fontsize=7, frameon=False)
    return _save(fig, path)


def plot_sweep(table: list, out_dir) -> list:
    """One figure per eval year: metrics against the uncertainty threshold."""
    out = []
    for year in sorted({r["year"] for r in table}):
        rows = sorted((r for r in table if r["year"] == year), key=lambda r: r["epsilon"])
        eps = [r["epsilon"] for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name in TABLE_CLASSES:
            vals = [np.nan if r.get(name) is None else 100 * r[name] for r in rows]
            ax.plot(eps, vals, "--", color=CLASS_COLORS[name], lw=1, label=name)
        ax.plot(eps, [np.nan if r["mIoU"] is None else 100 * r["mIoU"] for r in rows], "-", color="k", lw=2, label="mIoU")
        ax.plot(eps, [100 * r["OA"] for r in rows], "-", color="#8d6e63", lw=2, label="OA")
        ax.set_xlabel("uncertainty threshold")
        ax.set_ylabel("%")
        ax.set_title(str(year))
        ax.legend(ncol=4, fontsize=7, frameon=False)
        out.append(_save(fig, Path(out_dir) / f"sweep_{year}.png"))
    return out


def plot_label_comparison(overlays: dict, ious: dict, path) -> Path:
    names = [n for n in overlays if ious.get(n) is not None]
    fig, axes = plt.subplots(1, max(1, len(names)), figsize=(2.6 * max(1, len(names)), 2.8), squeeze=False)
    for ax, name in zip(axes[0], names):
        ax.imshow(overlays[name], interpolation="nearest")
        ax.set_title(f"{name} ({100 * ious[name]:.1f}%)")
        ax.axis("off")
    return _save(fig, path)
