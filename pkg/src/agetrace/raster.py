"""Map sheets, label rasters, manifests, tiling and augmentation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IGNORE = -1
# on-disk code for IGNORE in 8-bit label PNGs
IGNORE_PNG = 255

PathLike = Union[str, Path]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClassScheme:
    names: tuple = ("WL", "GL", "SM", "FW", "SW", "UK")

    @property
    def count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ManifestError(f"unknown class name {name!r}") from None


DEFAULT_SCHEME = ClassScheme()


@dataclass
class MapSheet:
    image: np.ndarray  # H x W x 3 uint8
    year: int
    patch_id: str
    pixel_size: float = 1.0

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise ValueError(f"map sheet must be H x W x 3, got {img.shape}")
        if img.dtype != np.uint8:
            if img.min() < 0 or img.max() > 255:
                raise ValueError("map sheet channel values must lie in [0, 255]")
            img = img.astype(np.uint8)
        self.image = img

    @property
    def shape(self) -> tuple:
        return self.image.shape[:2]


@dataclass
class LabelRaster:
    labels: np.ndarray  # H x W int, values in {-1, 0..C-1}
    year: int
    patch_id: str
    scheme: ClassScheme = DEFAULT_SCHEME

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"label raster must be 2-D, got {lab.shape}")
        lab = lab.astype(np.int64)
        if lab.size and (lab.min() < IGNORE or lab.max() >= self.scheme.count):
            raise ValueError(
                f"label values must lie in {{-1, 0..{self.scheme.count - 1}}}"
            )
        self.labels = lab

    @property
    def shape(self) -> tuple:
        return self.labels.shape


# --------------------------------------------------------------------------
# raster I/O


def read_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: PathLike, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def read_label_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.int64)
    if raw.ndim != 2:
        raise ValueError(f"label PNG {path} must be single-channel")
    out = raw.copy()
    out[raw == IGNORE_PNG] = IGNORE
    return out


def write_label_png(path: PathLike, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.size and (lab.min() < IGNORE or lab.max() >= IGNORE_PNG):
        raise ValueError("label values out of encodable range")
    enc = np.where(lab == IGNORE, IGNORE_PNG, lab).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(enc, mode="L").save(path)


def _image_size(path: Path) -> tuple:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    patch_id: str
    year: int
    image: Optional[Path]
    label: Optional[Path] = None


@dataclass
class Manifest:
    entries: list
    anchor_label_year: dict = field(default_factory=dict)  # patch_id -> a_y
    scheme: ClassScheme = DEFAULT_SCHEME
    root: Optional[Path] = None

    @property
    def patches(self) -> list:
        return sorted({e.patch_id for e in self.entries})

    def for_patch(self, patch_id: str, with_image: bool = True) -> list:
        return [
            e
            for e in self.entries
            if e.patch_id == patch_id and (e.image is not None or not with_image)
        ]

    def years(self, patch_id: str) -> list:
        return [e.year for e in self.for_patch(patch_id)]

    def labeled(self, patch_id: Optional[str] = None) -> list:
        return [
            e
            for e in self.entries
            if e.label is not None and (patch_id is None or e.patch_id == patch_id)
        ]

    def entry(self, patch_id: str, year: int) -> ManifestEntry:
        for e in self.entries:
            if e.patch_id == patch_id and e.year == year:
                return e
        raise KeyError((patch_id, year))

    def load_sheet(self, entry: ManifestEntry) -> MapSheet:
        if entry.image is None:
            raise ValueError(f"no image for {entry.patch_id}/{entry.year}")
        return MapSheet(read_image(entry.image), entry.year, entry.patch_id)

    def load_label(self, entry: ManifestEntry) -> LabelRaster:
        if entry.label is None:
            raise ValueError(f"no label for {entry.patch_id}/{entry.year}")
        return LabelRaster(
            read_label_png(entry.label), entry.year, entry.patch_id, self.scheme
        )

    def to_json(self, path: PathLike) -> None:
        """Write the manifest with paths relative to ``path``'s directory."""
        path = Path(path)
        base = path.parent.resolve()

        def rel(p):
            if p is None:
                return None
            p = Path(p).resolve()
            try:
                return p.relative_to(base).as_posix()
            except ValueError:
                return str(p)

        doc = {
            "classes": list(self.scheme.names),
            "anchor_label_year": dict(sorted(self.anchor_label_year.items())),
            "entries": [
                {
                    "patch_id": e.patch_id,
                    "year": e.year,
                    "image": rel(e.image),
                    "label": rel(e.label),
                }
                for e in self.entries
            ],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2))


def _parse_entries(raw: Iterable[dict], base: Path) -> list:
    entries = []
    for item in raw:
        try:
            patch = str(item["patch_id"])
            year = int(item["year"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest entry {item!r}") from exc
        img = item.get("image")
        lab = item.get("label")
        if img is None and lab is None:
            raise ManifestError(f"entry {patch}/{year} has neither image nor label")
        entries.append(
            ManifestEntry(
                patch,
                year,
                base / img if img is not None else None,
                base / lab if lab is not None else None,
            )
        )
    return entries


def validate_manifest(manifest: Manifest, check_files: bool = True) -> None:
    seen = set()
    for e in manifest.entries:
        key = (e.patch_id, e.year)
        if key in seen:
            raise ManifestError(f"duplicate (patch_id, year) {key}")
        seen.add(key)

    for patch in manifest.patches:
        years = [e.year for e in manifest.entries if e.patch_id == patch]
        if any(b <= a for a, b in zip(years, years[1:])):
            raise ManifestError(f"years not strictly increasing for patch {patch}")

    if not manifest.labeled():
        raise ManifestError("manifest has no labeled entry")

    for patch, a_y in manifest.anchor_label_year.items():
        if patch not in manifest.patches:
            raise ManifestError(f"anchor_label_year given for unknown patch {patch}")
        try:
            anchor = manifest.entry(patch, a_y)
        except KeyError:
            raise ManifestError(f"no entry for anchor year {a_y} of patch {patch}") from None
        if anchor.label is None:
            raise ManifestError(f"anchor year {a_y} of patch {patch} has no label")

    if not check_files:
        return
    for e in manifest.entries:
        for p in (e.image, e.label):
            if p is not None and not p.exists():
                raise ManifestError(f"missing raster file {p}")
        if e.image is not None and e.label is not None:
            if _image_size(e.image) != _image_size(e.label):
                raise ManifestError(
                    f"label shape mismatch with image for {e.patch_id}/{e.year}"
                )


def load_manifest(path: PathLike, check_files: bool = True) -> Manifest:
    """Read and validate a manifest JSON document.

    The document is either a bare list of entries or an object with an
    ``entries`` list, an optional ``anchor_label_year`` (an int applied to all
    patches, or a ``{patch_id: year}`` mapping) and an optional ``classes``
    list. Entry paths are relative to the manifest file.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    base = path.parent

    if isinstance(doc, list):
        raw_entries, meta = doc, {}
    else:
        raw_entries, meta = doc.get("entries", []), doc

    scheme = DEFAULT_SCHEME
    if "classes" in meta:
        for name in meta["classes"]:
            DEFAULT_SCHEME.index(name)
        scheme = ClassScheme(tuple(meta["classes"]))

    entries = _parse_entries(raw_entries, base)
    # order within a patch is validated before sorting
    manifest = Manifest(entries=entries, scheme=scheme, root=base)
    validate_manifest(manifest, check_files=False)
    manifest.entries = sorted(entries, key=lambda e: (e.patch_id, e.year))

    anchor = meta.get("anchor_label_year")
    if isinstance(anchor, dict):
        manifest.anchor_label_year = {str(k): int(v) for k, v in anchor.items()}
    elif anchor is not None:
        manifest.anchor_label_year = {
            p: int(anchor)
            for p in manifest.patches
            if any(e.year == int(anchor) and e.label for e in manifest.for_patch(p, False))
        }
    validate_manifest(manifest, check_files=check_files)
    return manifest


# --------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    overlap: int
    height: int
    width: int
    origins: tuple

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(extent: int, tile: int, stride: int) -> list:
    last = extent - tile
    out = list(range(0, last + 1, stride))
    if out[-1] != last:
        out.append(last)
    return out


def make_tile_grid(height: int, width: int, tile_size: int, overlap: int) -> TileGrid:
    """Row-major tile origins at stride ``tile_size - overlap``.

    The final origin on each axis is clamped to ``extent - tile_size`` so every
    tile lies fully inside the raster. A tile larger than the raster is shrunk
    to the raster's smaller side.
    """
    if height <= 0 or width <= 0:
        raise ValueError("raster dimensions must be positive")
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    if not 0 <= overlap < tile_size:
        raise ValueError("overlap must satisfy 0 <= overlap < tile_size")
    tile = min(tile_size, height, width)
    stride = tile_size - overlap
    if tile != tile_size:
        stride = max(1, min(stride, tile))
        overlap = tile - stride
    rows = _axis_origins(height, tile, stride)
    cols = _axis_origins(width, tile, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return TileGrid(tile, overlap, height, width, origins)


def extract_tiles(sheet, labels=None, grid: TileGrid = None) -> list:
    """Cut aligned ``(image_tile, label_tile)`` pairs from a sheet.

    ``sheet`` may be a :class:`MapSheet` or a bare array whose leading two
    axes are spatial; ``labels`` likewise.
    """
    img = sheet.image if isinstance(sheet, MapSheet) else np.asarray(sheet)
    lab = None
    if labels is not None:
        lab = labels.labels if isinstance(labels, LabelRaster) else np.asarray(labels)
        if lab.shape[:2] != img.shape[:2]:
            raise ValueError("label raster shape differs from image shape")
    if img.shape[:2] != (grid.height, grid.width):
        raise ValueError(
            f"grid built for {(grid.height, grid.width)}, sheet is {img.shape[:2]}"
        )
    t = grid.tile_size
    out = []
    for r, c in grid.origins:
        it = img[r : r + t, c : c + t]
        lt = lab[r : r + t, c : c + t] if lab is not None else None
        out.append((it, lt))
    return out


def stitch_predictions(tiles: Sequence[np.ndarray], grid: TileGrid) -> np.ndarray:
    """Reassemble per-tile results into a full raster.

    Float tiles (``t x t x C`` score volumes) are averaged where tiles
    overlap. Integer tiles (label tiles) are mosaicked, later tiles winning;
    this is only exact for labels when the overlapping tiles agree.
    """
    if len(tiles) != len(grid.origins):
        raise ValueError(f"got {len(tiles)} tiles for {len(grid.origins)} origins")
    first = np.asarray(tiles[0])
    t = grid.tile_size
    if first.shape[:2] != (t, t):
        raise ValueError(f"tiles must be {t}x{t}, got {first.shape[:2]}")
    shape = (grid.height, grid.width) + first.shape[2:]

    if np.issubdtype(first.dtype, np.floating):
        acc = np.zeros(shape, dtype=np.float64)
        cnt = np.zeros((grid.height, grid.width), dtype=np.float64)
        for (r, c), tile in zip(grid.origins, tiles):
            acc[r : r + t, c : c + t] += tile
            cnt[r : r + t, c : c + t] += 1
        cnt = cnt.reshape(cnt.shape + (1,) * (acc.ndim - 2))
        return (acc / cnt).astype(first.dtype)

    out = np.empty(shape, dtype=first.dtype)
    for (r, c), tile in zip(grid.origins, tiles):
        out[r : r + t, c : c + t] = tile
    return out


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class Transform:
    flip_h: bool = False
    flip_v: bool = False
    rot_k: int = 0

    def apply(self, arr: np.ndarray) -> np.ndarray:
        if self.flip_h:
            arr = arr[:, ::-1]
        if self.flip_v:
            arr = arr[::-1, :]
        if self.rot_k:
            arr = np.rot90(arr, self.rot_k, axes=(0, 1))
        return np.ascontiguousarray(arr)


def draw_transform(rng: np.random.Generator) -> Transform:
    return Transform(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        rot_k=int(rng.integers(0, 4)),
    )


def augment(image: np.ndarray, labels: Optional[np.ndarray], rng) -> tuple:
    """Apply one random flip/right-angle-rotation to an aligned pair.

    ``rng`` is a :class:`numpy.random.Generator` or an explicit
    :class:`Transform`.
    """
    tf = rng if isinstance(rng, Transform) else draw_transform(rng)
    img = tf.apply(image)
    lab = tf.apply(labels) if labels is not None else None
    return img, lab
