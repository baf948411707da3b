"""Pre-training and per-step fine-tuning with masked cross-entropy."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .raster import IGNORE, LabelRaster, MapSheet, augment, extract_tiles, make_tile_grid, stitch_predictions
from .unet import UNet, save_checkpoint, to_tensor

logger = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune", "all")
LOG_COLUMNS = ("phase", "trace_step", "epoch", "lr", "mean_loss")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 20
    initial_lr: float = 1e-4
    lr_drop_epochs: tuple = (10, 15)
    lr_drop_factor: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 8
    tile_size: int = 384
    overlap: int = 128
    seed: int = 0
    optimizer: str = "adam"
    augment: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError("optimizer must be adam or adamw")
        object.__setattr__(self, "lr_drop_epochs", tuple(self.lr_drop_epochs))

    @classmethod
    def pretrain_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(phase="finetune", epochs=5, initial_lr=1e-5, lr_drop_epochs=(3,))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    drops = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.initial_lr * config.lr_drop_factor**drops


def masked_cross_entropy(scores: torch.Tensor, labels: torch.Tensor, from_logits: bool = False) -> torch.Tensor:
    """Mean ``-log s[y]`` over pixels whose label is not -1.

    ``scores`` is ``N x C x H x W`` (probabilities, or logits with
    ``from_logits``); ``labels`` is ``N x H x W``. A fully masked batch gives
    a zero loss that still carries a graph.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    c = scores.shape[1]
    if labels.numel() and labels.max() >= c:
        raise ValueError(f"label id {int(labels.max())} >= number of classes {c}")
    if labels.numel() and labels.min() < IGNORE:
        raise ValueError("label ids below -1")
    valid = labels != IGNORE
    if not valid.any():
        logger.warning("every pixel in the batch is masked; loss is 0")
        return scores.sum() * 0.0
    if from_logits:
        logp = F.log_softmax(scores, dim=1)
    else:
        logp = torch.log(scores.clamp_min(torch.finfo(scores.dtype).tiny))
    target = labels.clamp_min(0).unsqueeze(1)
    nll = -logp.gather(1, target).squeeze(1)
    return nll[valid].mean()


# --------------------------------------------------------------------------
# data


@dataclass
class TilePool:
    """Training tiles cut from a list of (sheet, label) pairs."""

    images: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    sources: list = field(default_factory=list)  # (patch_id, year) per tile

    @classmethod
    def from_pairs(cls, pairs: Sequence, tile_size: int, overlap: int) -> "TilePool":
        pool = cls()
        for sheet, lab in pairs:
            h, w = sheet.shape
            grid = make_tile_grid(h, w, tile_size, overlap)
            for it, lt in extract_tiles(sheet, lab, grid):
                pool.images.append(it)
                pool.labels.append(lt)
                pool.sources.append((sheet.patch_id, sheet.year))
        return pool

    def __len__(self) -> int:
        return len(self.images)

    def epoch_order(self, rng: np.random.Generator) -> np.ndarray:
        return rng.permutation(len(self))


def _phase_rng(seed: int, phase: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, PHASES.index(phase), step + 1])


def _make_optimizer(model, config: TrainConfig):
    cls = torch.optim.Adam if config.optimizer == "adam" else torch.optim.AdamW
    return cls(model.parameters(), lr=config.initial_lr, weight_decay=config.weight_decay)


class TrainLog:
    """CSV training log, one row per epoch."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list = []

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is None:
            return
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            if new:
                w.writeheader()
            w.writerow({k: row[k] for k in LOG_COLUMNS})


def train_epochs(
    model: UNet,
    pairs: Sequence,
    config: TrainConfig,
    trace_step: int = -1,
    log: Optional[TrainLog] = None,
) -> list:
    """Run ``config.epochs`` passes over all tiles of ``pairs``.

    A fresh optimizer is created on every call. Returns per-epoch mean loss.
    """
    if not pairs:
        raise ValueError("empty training set")
    pool = TilePool.from_pairs(pairs, config.tile_size, config.overlap)
    rng = _phase_rng(config.seed, config.phase, trace_step)
    opt = _make_optimizer(model, config)
    dtype = next(model.parameters()).dtype
    model.train()
    losses = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = pool.epoch_order(rng)
        total, n = 0.0, 0
        t0 = time.time()
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            imgs, labs = [], []
            for k in idx:
                if config.augment:
                    im, lb = augment(pool.images[k], pool.labels[k], rng)
                else:
                    im, lb = pool.images[k], pool.labels[k]
                imgs.append(im)
                labs.append(lb)
            x = to_tensor(np.stack(imgs)).to(dtype)
            y = torch.from_numpy(np.stack(labs).astype(np.int64))
            loss = masked_cross_entropy(model(x), y, from_logits=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        mean = total / n
        losses.append(mean)
        logger.info(
            "%s step %d epoch %d lr %.1e loss %.4f (%.1fs)",
            config.phase, trace_step, epoch, lr, mean, time.time() - t0,
        )
        if log is not None:
            log.write(dict(phase=config.phase, trace_step=trace_step, epoch=epoch, lr=lr, mean_loss=mean))
    return losses


def pretrain(model: UNet, anchor_pairs: Sequence, config: TrainConfig, checkpoint=None, log=None) -> list:
    """Train on the anchor-year pairs; optionally persist a checkpoint."""
    if not anchor_pairs:
        raise ValueError("empty training set")
    losses = train_epochs(model, anchor_pairs, config, trace_step=-1, log=log)
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, phase=config.phase, losses=losses)
    return losses


def finetune_step(
    model: UNet, pairs: Sequence, config: TrainConfig, trace_step: int, checkpoint=None, log=None
) -> Optional[list]:
    """Fine-tune on the cumulative active set of one tracing step.

    Returns None without touching the model when ``pairs`` is empty.
    """
    if not pairs:
        return None
    losses = train_epochs(model, pairs, config, trace_step=trace_step, log=log)
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, phase=config.phase, trace_step=trace_step, losses=losses)
    return losses


# --------------------------------------------------------------------------
# inference


def predict_scores(model: UNet, sheet, tile_size: int = 1024, overlap: int = 0, batch_size: int = 4) -> np.ndarray:
    """Sliding-window softmax scores (``H x W x C``) for a whole sheet."""
    img = sheet.image if isinstance(sheet, MapSheet) else np.asarray(sheet)
    h, w = img.shape[:2]
    grid = make_tile_grid(h, w, tile_size, overlap)
    tiles = [t for t, _ in extract_tiles(img, None, grid)]
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(tiles), batch_size):
            x = to_tensor(np.stack(tiles[start : start + batch_size])).to(dtype)
            probs = F.softmax(model(x), dim=1).permute(0, 2, 3, 1)
            out.extend(probs.float().numpy())
    return stitch_predictions(out, grid)


def predict_labels(model: UNet, sheet, **kw) -> LabelRaster:
    scores = predict_scores(model, sheet, **kw)
    year = getattr(sheet, "year", 0)
    patch = getattr(sheet, "patch_id", "")
    return LabelRaster(scores.argmax(axis=-1), year, patch)
