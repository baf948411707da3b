"""Procedural sequences of year-stamped maps with style drift and land-use change.

Each patch gets a label raster that evolves year to year by region growing,
and every year gets a cartographic style (per-class colours, symbol colour,
symbol density, texture strength) that drifts smoothly along the sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .raster import DEFAULT_SCHEME, LabelRaster, Manifest, ManifestEntry, MapSheet, write_image, write_label_png

logger = logging.getLogger(__name__)

WL, GL, SM, FW, SW, UK = range(6)
# style vector: base rgb (3), symbol rgb (3), symbol density, texture amplitude
N_STYLE = 8

DEFAULT_MIX = {"WL": 0.25, "GL": 0.45, "SM": 0.14, "FW": 0.06, "SW": 0.04, "UK": 0.06}

# reference palette the drift starts from; distinct enough to learn
_BASE_STYLE = np.array(
    [
        # base rgb          symbol rgb        dens  tex
        [0.62, 0.80, 0.55, 0.15, 0.40, 0.15, 0.55, 0.30],  # WL
        [0.95, 0.93, 0.80, 0.70, 0.75, 0.45, 0.15, 0.20],  # GL
        [0.85, 0.45, 0.40, 0.35, 0.15, 0.15, 0.60, 0.25],  # SM
        [0.45, 0.70, 0.95, 0.10, 0.25, 0.70, 0.80, 0.15],  # FW
        [0.30, 0.55, 0.85, 0.10, 0.20, 0.55, 0.40, 0.10],  # SW
        [0.80, 0.80, 0.80, 0.30, 0.30, 0.30, 0.50, 0.20],  # UK
    ]
)
# each class's colours drift toward those of another class
_DRIFT_TARGET = (GL, SM, WL, SW, FW, GL)


@dataclass
class SynthConfig:
    num_years: int = 7
    start_year: int = 1900
    year_gap: int = 10
    raster_size: int = 512
    seed: int = 0
    style_drift_rate: float = 0.15
    landuse_change_rate: float = 0.02
    class_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    num_patches: int = 4
    # "middle", "first", "last", "beyond" (one label-only year after the last map) or a year
    anchor: object = "middle"
    era_changes: tuple = ()  # step indices where the style jumps
    era_jump: float = 0.3
    noise_sigma: float = 6.0

    def __post_init__(self):
        if self.num_years < 1 or self.raster_size < 16 or self.num_patches < 1:
            raise ValueError("invalid synthetic sequence size")
        if not 0 <= self.style_drift_rate <= 1 or not 0 <= self.landuse_change_rate <= 1:
            raise ValueError("rates must lie in [0, 1]")
        total = sum(self.class_mix.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"class_mix sums to {total}, expected 1")
        for name in self.class_mix:
            DEFAULT_SCHEME.index(name)

    @property
    def years(self) -> list:
        return [self.start_year + k * self.year_gap for k in range(self.num_years)]

    @property
    def patch_ids(self) -> list:
        return [f"p{k}" for k in range(self.num_patches)]

    def anchor_year(self) -> int:
        years = self.years
        if self.anchor == "middle":
            return years[(len(years) - 1) // 2]
        if self.anchor == "first":
            return years[0]
        if self.anchor == "last":
            return years[-1]
        if self.anchor == "beyond":
            return years[-1] + self.year_gap
        return int(self.anchor)


@dataclass
class SynthSequence:
    config: SynthConfig
    sheets: list  # MapSheet per (patch, year), patch-major
    labels: list  # LabelRaster, aligned with sheets
    styles: np.ndarray  # years x classes x N_STYLE
    changes: dict  # (patch_id, year) -> bool mask of pixels changed since previous year
    extra_labels: list = field(default_factory=list)  # label-only years

    def sheet(self, patch_id: str, year: int) -> MapSheet:
        for s in self.sheets:
            if s.patch_id == patch_id and s.year == year:
                return s
        raise KeyError((patch_id, year))

    def label(self, patch_id: str, year: int) -> LabelRaster:
        for lab in self.labels + self.extra_labels:
            if lab.patch_id == patch_id and lab.year == year:
                return lab
        raise KeyError((patch_id, year))

    def write(self, out_dir) -> Manifest:
        """Write PNG rasters plus ``manifest.json``; returns the full manifest."""
        out = Path(out_dir)
        entries = []
        for sheet, lab in zip(self.sheets, self.labels):
            stem = f"{sheet.patch_id}_{sheet.year}"
            img_path = out / "images" / f"{stem}.png"
            lab_path = out / "labels" / f"{stem}.png"
            write_image(img_path, sheet.image)
            write_label_png(lab_path, lab.labels)
            entries.append(ManifestEntry(sheet.patch_id, sheet.year, img_path, lab_path))
        for lab in self.extra_labels:
            lab_path = out / "labels" / f"{lab.patch_id}_{lab.year}.png"
            write_label_png(lab_path, lab.labels)
            entries.append(ManifestEntry(lab.patch_id, lab.year, None, lab_path))
        entries.sort(key=lambda e: (e.patch_id, e.year))
        a_y = self.config.anchor_year()
        manifest = Manifest(entries, {p: a_y for p in self.config.patch_ids}, root=out)
        manifest.to_json(out / "manifest.json")
        return manifest


# --------------------------------------------------------------------------
# labels


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _draw_path(rng, size, width, mask) -> None:
    """Meandering band across the raster, written into ``mask``."""
    n = 4 * size
    horizontal = rng.random() < 0.5
    t = np.linspace(0, size - 1, n)
    phase = rng.uniform(0, 2 * np.pi, 2)
    amp = rng.uniform(0.05, 0.15, 2) * size
    freq = rng.uniform(1.0, 2.5, 2) * 2 * np.pi / size
    off = rng.uniform(0.25, 0.75) * size
    other = off + amp[0] * np.sin(freq[0] * t + phase[0]) + amp[1] * np.sin(freq[1] * t + phase[1])
    rows, cols = (other, t) if horizontal else (t, other)
    pts = np.zeros((size, size), dtype=bool)
    r = np.clip(np.round(rows).astype(int), 0, size - 1)
    c = np.clip(np.round(cols).astype(int), 0, size - 1)
    pts[r, c] = True
    dist = ndimage.distance_transform_edt(~pts)
    mask |= dist <= width / 2


def _initial_labels(rng, cfg: SynthConfig) -> np.ndarray:
    size = cfg.raster_size
    scale = size / 512
    mix = {DEFAULT_SCHEME.index(k): v for k, v in cfg.class_mix.items()}
    lab = np.full((size, size), GL, dtype=np.int64)
    free = np.ones((size, size), dtype=bool)

    if mix.get(FW, 0) > 0:
        river = np.zeros_like(free)
        while river.mean() < mix[FW]:
            _draw_path(rng, size, max(3.0, 14 * scale * rng.uniform(0.7, 1.3)), river)
        lab[river] = FW
        free &= ~river
    if mix.get(UK, 0) > 0:
        roads = np.zeros_like(free)
        while (roads & free).mean() < mix[UK]:
            _draw_path(rng, size, max(2.0, 5 * scale), roads)
        roads &= free
        lab[roads] = UK
        free &= ~roads

    for cls, sigma in ((SW, 6.0), (SM, 10.0), (WL, 18.0)):
        frac = mix.get(cls, 0)
        if frac <= 0:
            continue
        f = _smooth_field(rng, (size, size), sigma * scale)
        n = int(round(frac * size * size))
        cand = np.flatnonzero(free)
        if n == 0 or cand.size == 0:
            continue
        top = cand[np.argsort(-f.ravel()[cand], kind="stable")[: min(n, cand.size)]]
        lab.ravel()[top] = cls
        free.ravel()[top] = False
    return lab


def _evolve(rng, lab: np.ndarray, rate: float) -> tuple:
    """Grow neighbouring regions into each other until exactly ``rate`` of pixels changed."""
    size = lab.shape[0]
    budget = int(round(rate * lab.size))
    out = lab.copy()
    changed = np.zeros(lab.shape, dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    guard = 0
    while changed.sum() < budget and guard < 10000:
        guard += 1
        cy, cx = rng.integers(0, size, 2)
        radius = rng.uniform(6, 28) * size / 512
        ang = rng.uniform(0, 2 * np.pi)
        sy = int(np.clip(cy + 1.2 * radius * np.sin(ang), 0, size - 1))
        sx = int(np.clip(cx + 1.2 * radius * np.cos(ang), 0, size - 1))
        new_cls = out[sy, sx]
        if new_cls == FW:
            continue
        win = 3 * int(radius) + 2
        r0, r1 = max(0, cy - win), min(size, cy + win + 1)
        c0, c1 = max(0, cx - win), min(size, cx + win + 1)
        d = np.hypot(yy[r0:r1, c0:c1] - cy, xx[r0:r1, c0:c1] - cx)
        d = d * (1 + 0.35 * rng.standard_normal(d.shape))
        sub = out[r0:r1, c0:c1]
        ok = (d < radius) & (sub != new_cls) & (sub != FW) & ~changed[r0:r1, c0:c1]
        cand = np.flatnonzero(ok)
        if cand.size == 0:
            continue
        need = budget - int(changed.sum())
        cand = cand[np.argsort(d.ravel()[cand], kind="stable")[:need]]
        rr, cc = np.unravel_index(cand, sub.shape)
        out[r0 + rr, c0 + cc] = new_cls
        changed[r0 + rr, c0 + cc] = True
    return out, changed


# --------------------------------------------------------------------------
# styles and rendering


def style_schedule(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-year class styles, ``num_years x C x N_STYLE`` in [0, 1].

    Every parameter moves monotonically along a fixed per-class direction
    with unit max-norm, so consecutive years differ by at most the drift rate
    per parameter (plus any era jumps).
    """
    c = len(_BASE_STYLE)
    start = np.clip(_BASE_STYLE + rng.uniform(-0.05, 0.05, _BASE_STYLE.shape), 0, 1)
    direction = np.empty_like(start)
    for k in range(c):
        tgt = start[_DRIFT_TARGET[k]]
        d = np.empty(N_STYLE)
        d[:6] = tgt[:6] - start[k, :6]
        d[6:] = rng.choice([-1.0, 1.0], 2) * rng.uniform(0.3, 1.0, 2)
        direction[k] = d / np.abs(d).max()
    # the middle year carries the reference palette
    mid = (cfg.num_years - 1) // 2
    pos = np.array([cfg.style_drift_rate * (k - mid) for k in range(cfg.num_years)])
    for e in cfg.era_changes:
        pos += np.where(np.arange(cfg.num_years) >= e, cfg.era_jump, 0.0) - (cfg.era_jump if mid >= e else 0.0)
    styles = start[None] + pos[:, None, None] * direction[None]
    return np.clip(styles, 0.0, 1.0)


def _render(lab: np.ndarray, style: np.ndarray, tex: np.ndarray, dots: np.ndarray, noise: np.ndarray) -> np.ndarray:
    base = style[lab, 0:3]
    sym = style[lab, 3:6]
    dens = style[lab, 6]
    amp = style[lab, 7]
    img = base * (1 + 0.25 * amp[..., None] * tex[..., None])

    size = lab.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    symbol = np.zeros(lab.shape, dtype=bool)
    # woodland: stippled tree dots
    symbol |= (lab == WL) & (dots < 0.5 * dens)
    # settlement: diagonal hatching
    symbol |= (lab == SM) & ((yy + xx) % 7 < 1 + 2 * dens)
    # grassland: sparse dots
    symbol |= (lab == GL) & (dots < 0.08 * dens)
    # water bodies and roads: outlines
    for cls in (FW, SW, UK):
        m = lab == cls
        width = 1 + int(2 * style[cls, 6])
        symbol |= m & ~ndimage.binary_erosion(m, iterations=width, border_value=1)
    img = np.where(symbol[..., None], sym, img)
    img = img * 255 + noise
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_sequence(config: SynthConfig) -> SynthSequence:
    root = np.random.SeedSequence(config.seed)
    style_ss, *patch_ss = root.spawn(1 + config.num_patches)
    styles = style_schedule(config, np.random.default_rng(style_ss))
    years = config.years
    extra_year = config.anchor == "beyond"

    sheets, labels, extra, changes = [], [], [], {}
    size = config.raster_size
    for pid, ss in zip(config.patch_ids, patch_ss):
        lab_rng, tex_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        # per-patch render noise is year-independent: with no drift and no
        # land-use change every year renders identically
        tex = _smooth_field(tex_rng, (size, size), 2.0)
        dots = tex_rng.random((size, size))
        noise = tex_rng.normal(0, config.noise_sigma, (size, size, 3))

        cur = _initial_labels(lab_rng, config)
        # evolve outward from the middle so the anchor year is not privileged
        seq = [None] * config.num_years
        mid = (config.num_years - 1) // 2
        seq[mid] = (cur, np.zeros(cur.shape, dtype=bool))
        for k in range(mid + 1, config.num_years):
            seq[k] = _evolve(lab_rng, seq[k - 1][0], config.landuse_change_rate)
        back = {}
        for k in range(mid - 1, -1, -1):
            nxt, mask = _evolve(lab_rng, seq[k + 1][0], config.landuse_change_rate)
            back[k] = mask
            seq[k] = (nxt, None)
        for k, year in enumerate(years):
            lab = seq[k][0]
            # changed-since-previous-year mask
            if k == 0:
                ch = np.zeros(lab.shape, dtype=bool)
            elif k <= mid:
                ch = back[k - 1]
            else:
                ch = seq[k][1]
            changes[(pid, year)] = ch
            sheets.append(MapSheet(_render(lab, styles[k], tex, dots, noise), year, pid))
            labels.append(LabelRaster(lab, year, pid))
        if extra_year:
            lab, ch = _evolve(lab_rng, seq[-1][0], config.landuse_change_rate)
            y = years[-1] + config.year_gap
            changes[(pid, y)] = ch
            extra.append(LabelRaster(lab, y, pid))
    return SynthSequence(config, sheets, labels, styles, changes, extra)


def holdout_split(manifest: Manifest, eval_patch: str) -> tuple:
    """Split into (train, eval) manifests by patch.

    The train manifest keeps only each patch's anchor-year label; the eval
    manifest keeps every label of the reserved patch.
    """
    if eval_patch not in manifest.patches:
        raise KeyError(f"unknown patch {eval_patch!r}")
    if len(manifest.patches) < 2:
        raise ValueError("need at least two patches to hold one out")
    train, evl = [], []
    for e in manifest.entries:
        if e.patch_id == eval_patch:
            if e.image is not None:
                evl.append(ManifestEntry(e.patch_id, e.year, e.image, e.label))
        else:
            keep = e.year == manifest.anchor_label_year.get(e.patch_id)
            if e.image is None and not keep:
                continue
            train.append(ManifestEntry(e.patch_id, e.year, e.image, e.label if keep else None))
    anchors = {p: y for p, y in manifest.anchor_label_year.items() if p != eval_patch}
    return (
        Manifest(train, anchors, manifest.scheme, manifest.root),
        Manifest(evl, {}, manifest.scheme, manifest.root),
    )


def write_split(seq: SynthSequence, out_dir, eval_patch: Optional[str] = None) -> tuple:
    """Write a sequence plus ``train.json`` / ``eval.json`` manifests."""
    out = Path(out_dir)
    full = seq.write(out)
    eval_patch = eval_patch or seq.config.patch_ids[-1]
    train, evl = holdout_split(full, eval_patch)
    train.to_json(out / "train.json")
    evl.to_json(out / "eval.json")
    return full, train, evl
