import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agetrace.raster import (
    DEFAULT_SCHEME,
    IGNORE,
    LabelRaster,
    ManifestError,
    MapSheet,
    Transform,
    augment,
    extract_tiles,
    load_manifest,
    make_tile_grid,
    read_label_png,
    stitch_predictions,
    write_image,
    write_label_png,
)


def test_default_scheme():
    assert DEFAULT_SCHEME.names == ("WL", "GL", "SM", "FW", "SW", "UK")
    assert DEFAULT_SCHEME.count == 6
    assert IGNORE not in range(DEFAULT_SCHEME.count)


def test_label_raster_rejects_out_of_range():
    with pytest.raises(ValueError):
        LabelRaster(np.array([[0, 6]]), 1900, "a")
    with pytest.raises(ValueError):
        LabelRaster(np.array([[-2, 0]]), 1900, "a")
    LabelRaster(np.array([[-1, 5]]), 1900, "a")


def test_map_sheet_shape_checked():
    with pytest.raises(ValueError):
        MapSheet(np.zeros((4, 4)), 1900, "a")
    with pytest.raises(ValueError):
        MapSheet(np.full((4, 4, 3), 300), 1900, "a")


def test_label_png_roundtrip(tmp_path):
    lab = np.array([[-1, 0, 5], [3, -1, 1]])
    write_label_png(tmp_path / "l.png", lab)
    np.testing.assert_array_equal(read_label_png(tmp_path / "l.png"), lab)
    from PIL import Image

    raw = np.asarray(Image.open(tmp_path / "l.png"))
    assert raw[0, 0] == 255


# --------------------------------------------------------------------------
# manifest


def _write_rasters(root, items, size=(8, 8)):
    entries = []
    for patch, year, labeled in items:
        img = root / f"{patch}_{year}.png"
        write_image(img, np.zeros(size + (3,), dtype=np.uint8))
        lab = None
        if labeled:
            lab = root / f"{patch}_{year}_lab.png"
            write_label_png(lab, np.zeros(size, dtype=int))
        entries.append(
            {"patch_id": patch, "year": year, "image": img.name, "label": lab.name if lab else None}
        )
    return entries


def test_manifest_table5_pattern(tmp_path):
    entries = _write_rasters(tmp_path, [("3922", y, True) for y in (1898, 1974, 1982, 1996)])
    entries += _write_rasters(tmp_path, [("3821", 1974, True), ("3821", 1990, False)])
    (tmp_path / "m.json").write_text(json.dumps({"entries": entries, "anchor_label_year": {"3821": 1974}}))
    m = load_manifest(tmp_path / "m.json")
    assert len(m.labeled("3922")) == 4
    assert m.years("3922") == [1898, 1974, 1982, 1996]
    assert m.anchor_label_year == {"3821": 1974}
    assert [(e.patch_id, e.year) for e in m.entries][:2] == [("3821", 1974), ("3821", 1990)]


def test_manifest_minimal_bare_list(tmp_path):
    entries = _write_rasters(tmp_path, [("a", 2000, True)])
    (tmp_path / "m.json").write_text(json.dumps(entries))
    m = load_manifest(tmp_path / "m.json")
    assert len(m.entries) == 1
    assert m.load_sheet(m.entries[0]).shape == (8, 8)


def test_manifest_years_not_increasing(tmp_path):
    entries = _write_rasters(tmp_path, [("a", 1975, True), ("a", 1974, False)])
    (tmp_path / "m.json").write_text(json.dumps(entries))
    with pytest.raises(ManifestError, match="years not strictly increasing"):
        load_manifest(tmp_path / "m.json")


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "missing.json")

    dup = _write_rasters(tmp_path, [("a", 1975, True)]) * 2
    (tmp_path / "dup.json").write_text(json.dumps(dup))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "dup.json")

    ok = _write_rasters(tmp_path, [("b", 1975, True)])
    (tmp_path / "cls.json").write_text(json.dumps({"entries": ok, "classes": ["WL", "XX"]}))
    with pytest.raises(ManifestError, match="unknown class"):
        load_manifest(tmp_path / "cls.json")

    write_label_png(tmp_path / "small.png", np.zeros((4, 4), dtype=int))
    bad = [dict(ok[0], label="small.png")]
    (tmp_path / "shape.json").write_text(json.dumps(bad))
    with pytest.raises(ManifestError, match="shape mismatch"):
        load_manifest(tmp_path / "shape.json")

    unlabeled = _write_rasters(tmp_path, [("c", 1975, False)])
    (tmp_path / "nolab.json").write_text(json.dumps(unlabeled))
    with pytest.raises(ManifestError, match="no labeled"):
        load_manifest(tmp_path / "nolab.json")


def test_manifest_label_only_anchor_year(tmp_path):
    entries = _write_rasters(tmp_path, [("a", 2016, False), ("a", 2017, False)])
    write_label_png(tmp_path / "a_2023.png", np.zeros((8, 8), dtype=int))
    entries.append({"patch_id": "a", "year": 2023, "image": None, "label": "a_2023.png"})
    (tmp_path / "m.json").write_text(json.dumps({"entries": entries, "anchor_label_year": 2023}))
    m = load_manifest(tmp_path / "m.json")
    assert m.years("a") == [2016, 2017]
    assert m.anchor_label_year == {"a": 2023}


def test_manifest_json_roundtrip(tmp_path):
    entries = _write_rasters(tmp_path, [("a", 1, True), ("a", 2, False)])
    (tmp_path / "m.json").write_text(json.dumps({"entries": entries, "anchor_label_year": 1}))
    m = load_manifest(tmp_path / "m.json")
    m.to_json(tmp_path / "copy.json")
    m2 = load_manifest(tmp_path / "copy.json")
    assert [(e.patch_id, e.year, e.image, e.label) for e in m2.entries] == [
        (e.patch_id, e.year, e.image, e.label) for e in m.entries
    ]


# --------------------------------------------------------------------------
# tiling


def test_grid_training_tiles():
    g = make_tile_grid(1024, 1024, 384, 128)
    # hand enumeration: 0, 256, 512 at stride 256, then clamp to 1024 - 384
    axis = [0, 256, 512, 640]
    assert len(g) == 16
    assert g.origins == tuple((r, c) for r in axis for c in axis)
    covered = np.zeros((1024, 1024), dtype=int)
    for r, c in g.origins:
        covered[r : r + 384, c : c + 384] += 1
    assert covered.min() >= 1


def test_grid_exact_fit_and_test_tiles():
    assert make_tile_grid(384, 384, 384, 128).origins == ((0, 0),)
    assert make_tile_grid(1024, 1024, 1024, 0).origins == ((0, 0),)


def test_grid_tile_larger_than_raster_is_clamped():
    g = make_tile_grid(512, 512, 1024, 0)
    assert g.tile_size == 512 and g.origins == ((0, 0),)


def test_grid_errors():
    with pytest.raises(ValueError):
        make_tile_grid(100, 100, 32, 32)
    with pytest.raises(ValueError):
        make_tile_grid(0, 100, 32, 0)


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(16, 300),
    w=st.integers(16, 300),
    tile=st.integers(8, 64),
    frac=st.floats(0, 0.9),
)
def test_grid_coverage_property(h, w, tile, frac):
    overlap = int(frac * tile)
    g = make_tile_grid(h, w, tile, overlap)
    t = g.tile_size
    cnt = np.zeros((h, w), dtype=int)
    for r, c in g.origins:
        assert 0 <= r <= h - t and 0 <= c <= w - t
        cnt[r : r + t, c : c + t] += 1
    assert cnt.min() >= 1
    if overlap > 0 and t == tile and h > t:
        # the row just past the first tile's stride boundary is seen twice
        assert cnt[g.stride, 0] >= 2


def test_extract_tiles_alignment():
    h = w = 1024
    img = np.arange(h * w * 3, dtype=np.int64).reshape(h, w, 3) % 251
    lab = np.arange(h * w).reshape(h, w) % 6
    sheet = MapSheet(img.astype(np.uint8), 1900, "a")
    g = make_tile_grid(h, w, 384, 128)
    pairs = extract_tiles(sheet, LabelRaster(lab, 1900, "a"), g)
    assert len(pairs) == 16
    for (r, c), (it, lt) in zip(g.origins, pairs):
        assert it.shape == (384, 384, 3) and lt.shape == (384, 384)
        np.testing.assert_array_equal(lt, lab[r : r + 384, c : c + 384])
    # clamped origin 640 spans rows 640..1023
    it, lt = pairs[-1]
    np.testing.assert_array_equal(lt[-1], lab[1023, 640:1024])
    np.testing.assert_array_equal(lt[0], lab[640, 640:1024])


def test_extract_tiles_without_labels_and_mismatch():
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    g = make_tile_grid(64, 64, 32, 0)
    assert all(lt is None for _, lt in extract_tiles(img, None, g))
    with pytest.raises(ValueError):
        extract_tiles(np.zeros((32, 64, 3)), None, g)


def test_stitch_roundtrip_scores_and_labels():
    rng = np.random.default_rng(0)
    scores = rng.random((200, 170, 4)).astype(np.float32)
    g = make_tile_grid(200, 170, 64, 16)
    tiles = [t for t, _ in extract_tiles(scores, None, g)]
    np.testing.assert_array_equal(stitch_predictions(tiles, g), scores)
    lab = rng.integers(-1, 6, (200, 170))
    tiles = [t for t, _ in extract_tiles(lab, None, g)]
    np.testing.assert_array_equal(stitch_predictions(tiles, g), lab)


def test_stitch_overlap_average():
    # 1 x 3 raster, two 1-wide... use a 2-class 4x6 raster with tiles of 4 at stride 2
    g = make_tile_grid(4, 6, 4, 2)
    assert g.origins == ((0, 0), (0, 2))
    a = np.zeros((4, 4, 2))
    a[..., 0], a[..., 1] = 0.8, 0.2
    b = np.zeros((4, 4, 2))
    b[..., 0], b[..., 1] = 0.4, 0.6
    out = stitch_predictions([a, b], g)
    np.testing.assert_allclose(out[0, 2], [0.6, 0.4])
    np.testing.assert_allclose(out[0, 0], [0.8, 0.2])
    np.testing.assert_allclose(out[0, 5], [0.4, 0.6])
    assert out[0, 2].argmax() == 0


def test_stitch_plain_mosaic_and_count_check():
    g = make_tile_grid(4, 4, 2, 0)
    tiles = [np.full((2, 2), k) for k in range(4)]
    np.testing.assert_array_equal(
        stitch_predictions(tiles, g), [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    )
    with pytest.raises(ValueError):
        stitch_predictions(tiles[:3], g)


# --------------------------------------------------------------------------
# augmentation


def test_augment_identity_and_involution():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)
    lab = rng.integers(0, 6, (8, 8))
    i2, l2 = augment(img, lab, Transform())
    np.testing.assert_array_equal(i2, img)
    np.testing.assert_array_equal(l2, lab)
    flip = Transform(flip_h=True)
    i3, l3 = augment(*augment(img, lab, flip), flip)
    np.testing.assert_array_equal(i3, img)
    np.testing.assert_array_equal(l3, lab)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_augment_preserves_alignment_and_histogram(seed):
    rng = np.random.default_rng(seed)
    h = w = 12
    lab = rng.integers(-1, 6, (h, w))
    # encode each pixel's label in the image so alignment can be checked
    img = np.stack([lab + 1, np.zeros_like(lab), np.zeros_like(lab)], -1).astype(np.uint8)
    i2, l2 = augment(img, lab, np.random.default_rng(seed))
    np.testing.assert_array_equal(i2[..., 0].astype(int) - 1, l2)
    np.testing.assert_array_equal(np.sort(l2.ravel()), np.sort(lab.ravel()))


def test_augment_draws_cover_all_transforms():
    rng = np.random.default_rng(0)
    from agetrace.raster import draw_transform

    seen = {draw_transform(rng) for _ in range(400)}
    assert len(seen) == 16
