import logging
import math
from collections import Counter

import numpy as np
import pytest
import torch

from agetrace.raster import LabelRaster
from agetrace.synth import SynthConfig, generate_sequence
from agetrace.train import (
    TilePool,
    TrainConfig,
    TrainLog,
    _phase_rng,
    finetune_step,
    lr_at,
    masked_cross_entropy,
    predict_labels,
    predict_scores,
    pretrain,
)
from agetrace.unet import UNetConfig, build_model, load_checkpoint

# -log(0.5) at 30 digits (mpmath)
NEG_LOG_HALF = 0.693147180559945309417232121458


def brute_loss(probs, labels):
    """Plain per-pixel loop over the unmasked pixels."""
    n, c, h, w = probs.shape
    terms = []
    for b in range(n):
        for i in range(h):
            for j in range(w):
                y = int(labels[b, i, j])
                if y != -1:
                    terms.append(-math.log(float(probs[b, y, i, j])))
    return sum(terms) / len(terms) if terms else 0.0


def test_loss_perfect_scores():
    labels = torch.tensor([[[0, 3], [5, 1]]])
    probs = torch.nn.functional.one_hot(labels, 6).permute(0, 3, 1, 2).double()
    assert masked_cross_entropy(probs, labels).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_fully_masked_warns(caplog):
    probs = torch.full((1, 6, 2, 2), 1 / 6, requires_grad=True)
    with caplog.at_level(logging.WARNING):
        loss = masked_cross_entropy(probs, torch.full((1, 2, 2), -1))
    assert loss.item() == 0.0
    assert "masked" in caplog.text
    loss.backward()


def test_loss_two_pixel_example():
    probs = torch.zeros(1, 6, 1, 2, dtype=torch.float64)
    probs[0, :2, 0, 0] = 0.5
    probs[0, 1, 0, 1] = 1.0
    labels = torch.tensor([[[0, -1]]])
    assert masked_cross_entropy(probs, labels).item() == pytest.approx(NEG_LOG_HALF, abs=1e-12)


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        masked_cross_entropy(torch.full((1, 6, 1, 1), 1 / 6), torch.tensor([[[6]]]))


@pytest.mark.parametrize("seed", range(5))
def test_masked_loss_equals_brute_force(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 6, 5, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(-1, 6, (2, 5, 4), generator=g)
    probs = torch.softmax(logits, 1)
    want = brute_loss(probs, labels)
    assert masked_cross_entropy(probs, labels).item() == pytest.approx(want, abs=1e-6)
    assert masked_cross_entropy(logits, labels, from_logits=True).item() == pytest.approx(want, abs=1e-6)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = build_model(UNetConfig(base_width=4), seed=0).double().train()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    y = torch.randint(-1, 6, (2, 16, 16))
    params = [p for p in model.parameters()]

    def loss_fn():
        return masked_cross_entropy(model(x), y, from_logits=True)

    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    h = 1e-7  # wider stencils can straddle ReLU / max-pool kinks
    checked = 0
    while checked < 20:
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-7:
            continue
        assert abs(analytic - numeric) / scale <= 1e-3, (idx, analytic, numeric)
        checked += 1


def test_lr_schedules():
    pre = TrainConfig.pretrain_defaults()
    assert (pre.epochs, pre.initial_lr, pre.lr_drop_epochs, pre.lr_drop_factor) == (20, 1e-4, (10, 15), 0.1)
    assert lr_at(pre, 9) == pytest.approx(1e-4)
    assert lr_at(pre, 10) == pytest.approx(1e-5)
    assert lr_at(pre, 15) == pytest.approx(1e-6)
    ft = TrainConfig.finetune_defaults()
    assert (ft.epochs, ft.initial_lr, ft.lr_drop_epochs) == (5, 1e-5, (3,))
    assert lr_at(ft, 2) == pytest.approx(1e-5)
    assert lr_at(ft, 3) == pytest.approx(1e-6)
    flat = TrainConfig(epochs=4, lr_drop_epochs=())
    assert {lr_at(flat, e) for e in range(4)} == {1e-4}
    with pytest.raises(ValueError):
        lr_at(pre, 20)
    assert pre.weight_decay == 0.01 and (pre.tile_size, pre.overlap) == (384, 128)


def test_lr_schedule_non_increasing():
    for cfg in (TrainConfig.pretrain_defaults(), TrainConfig.finetune_defaults()):
        lrs = [lr_at(cfg, e) for e in range(cfg.epochs)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


@pytest.fixture(scope="module")
def tiny_sequence():
    return generate_sequence(SynthConfig(num_years=3, raster_size=64, num_patches=2, seed=1))


def _pairs(seq, year):
    return [(s, l) for s, l in zip(seq.sheets, seq.labels) if s.year == year]


def test_overfit_fixed_batch():
    seq = generate_sequence(SynthConfig(num_years=1, raster_size=64, num_patches=1, seed=5))
    img, lab = seq.sheets[0].image, seq.labels[0].labels
    tiles = [(img[r : r + 32, c : c + 32], lab[r : r + 32, c : c + 32]) for r in (0, 32) for c in (0, 32)]
    x = torch.from_numpy(np.stack([t[0] for t in tiles])).permute(0, 3, 1, 2).float() / 255
    y = torch.from_numpy(np.stack([t[1] for t in tiles]))
    assert len(torch.unique(y)) > 1
    # desk-profile width and learning rate
    model = build_model(UNetConfig(base_width=16), seed=0).train()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for step in range(500):
        loss = masked_cross_entropy(model(x), y, from_logits=True)
        if loss.item() < 0.05:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.05


def _cfg(**kw):
    base = dict(epochs=3, initial_lr=1e-3, lr_drop_epochs=(2,), tile_size=32, overlap=0, batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


def test_pretrain_progress_checkpoint_and_log(tmp_path, tiny_sequence):
    model = build_model(UNetConfig(base_width=4), seed=0)
    log = TrainLog(tmp_path / "log.csv")
    losses = pretrain(model, _pairs(tiny_sequence, 1910), _cfg(epochs=6), checkpoint=tmp_path / "pre.ckpt", log=log)
    assert losses[-1] < losses[0]
    assert (tmp_path / "pre.ckpt").exists()
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "phase,trace_step,epoch,lr,mean_loss" and len(lines) == 7
    with pytest.raises(ValueError):
        pretrain(model, [], _cfg())


def test_pretrain_deterministic(tiny_sequence):
    curves = []
    for _ in range(2):
        model = build_model(UNetConfig(base_width=4), seed=0)
        curves.append(pretrain(model, _pairs(tiny_sequence, 1910), _cfg()))
    assert curves[0] == curves[1]


def test_pseudo_labels_after_pretraining(tiny_sequence):
    from agetrace.pseudo import generate_pseudo_labels

    model = build_model(UNetConfig(base_width=4), seed=0)
    pretrain(model, _pairs(tiny_sequence, 1910), _cfg(epochs=2))
    sheet = _pairs(tiny_sequence, 1900)[0][0]
    lab = generate_pseudo_labels(predict_scores(model, sheet, tile_size=64), 0.8, sheet.year, sheet.patch_id)
    assert lab.shape == sheet.shape and lab.year == 1900


def test_epoch_visits_every_tile_of_every_map(tiny_sequence):
    pairs = [(s, l) for s, l in zip(tiny_sequence.sheets, tiny_sequence.labels) if s.patch_id == "p0"]
    assert len(pairs) == 3
    pool = TilePool.from_pairs(pairs, 32, 16)
    order = pool.epoch_order(_phase_rng(0, "finetune", 1))
    counts = Counter(pool.sources[k] for k in order)
    # 64 px at tile 32 / stride 16: origins 0, 16, 32 per axis
    assert counts == {(s.patch_id, s.year): 9 for s, _ in pairs}


def test_finetune_noop_and_head(tmp_path, tiny_sequence):
    model = build_model(UNetConfig(base_width=4), seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    assert finetune_step(model, [], _cfg(phase="finetune"), trace_step=3) is None
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    finetune_step(model, _pairs(tiny_sequence, 1900), _cfg(phase="finetune", epochs=1), 0, checkpoint=tmp_path / "step0.ckpt")
    loaded, meta = load_checkpoint(tmp_path / "step0.ckpt")
    assert loaded.head.out_channels == 6 and meta["trace_step"] == 0


def test_predict_labels_shape(tiny_sequence):
    model = build_model(UNetConfig(base_width=4), seed=0)
    sheet = tiny_sequence.sheets[0]
    lab = predict_labels(model, sheet, tile_size=32, overlap=16)
    assert isinstance(lab, LabelRaster) and lab.shape == (64, 64)
