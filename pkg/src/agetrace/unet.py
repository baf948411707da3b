"""UNet segmentation backbone and checkpoint I/O."""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    num_classes: int = 6
    base_width: int = 64
    depth: int = 4
    batch_norm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.depth != 4:
            raise ValueError("depth is fixed at 4")
        if self.base_width < 1 or self.num_classes < 2:
            raise ValueError("invalid UNet config")

    @property
    def multiple(self) -> int:
        return 2**self.depth


def _conv(cin: int, cout: int, bn: bool) -> list:
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=not bn)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return layers


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, bn: bool):
        super().__init__()
        self.convs = nn.Sequential(*_conv(cin, cout, bn), *_conv(cout, cout, bn))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skip = self.convs(x)
        return self.pool(skip), skip


class UpBlock(nn.Module):
    """Transposed-conv upsampling, then two convs over [upsampled, skip]."""

    def __init__(self, cin: int, cout: int, bn: bool):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.convs = nn.Sequential(*_conv(2 * cout, cout, bn), *_conv(cout, cout, bn))

    def forward(self, x, skip):
        return self.convs(torch.cat([self.up(x), skip], dim=1))


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        bn = config.batch_norm
        widths = [config.base_width * 2**k for k in range(config.depth)]

        self.down = nn.ModuleList()
        cin = config.in_channels
        for w in widths:
            self.down.append(DownBlock(cin, w, bn))
            cin = w
        self.bottleneck = nn.Sequential(*_conv(cin, 2 * cin, bn), *_conv(2 * cin, 2 * cin, bn))
        cin = 2 * cin
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(UpBlock(cin, w, bn))
            cin = w
        self.head = nn.Conv2d(cin, config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return raw class logits, ``N x C x H x W``."""
        m = self.config.multiple
        if x.shape[-1] % m or x.shape[-2] % m:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {m}")
        skips = []
        for blk in self.down:
            x, s = blk(x)
            skips.append(s)
        x = self.bottleneck(x)
        for blk, s in zip(self.up, reversed(skips)):
            x = blk(x, s)
        return self.head(x)

    @property
    def num_skips(self) -> int:
        return len(self.up)


def init_weights(model: nn.Module, seed: int = 0) -> None:
    """Kaiming (fan-in) init for conv layers, seeded."""
    gen = torch.Generator().manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            if isinstance(mod, nn.ConvTranspose2d):
                # each output pixel sees in_channels * (k / stride)^2 inputs
                k = mod.kernel_size[0] * mod.kernel_size[1]
                s = mod.stride[0] * mod.stride[1]
                fan_in = mod.in_channels * max(1, k // s)
            else:
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
                if mod.bias is not None:
                    mod.bias.zero_()
        elif isinstance(mod, nn.BatchNorm2d):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)


def build_model(config: UNetConfig, seed: int = 0) -> UNet:
    model = UNet(config)
    init_weights(model, seed)
    return model


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``N x H x W x 3`` uint8 -> ``N x 3 x H x W`` float in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    return t.float() / 255.0


def forward(model: UNet, batch) -> torch.Tensor:
    """Softmax scores ``N x H x W x C`` in evaluation mode."""
    if not isinstance(batch, torch.Tensor):
        batch = to_tensor(batch)
    if batch.shape[1] != model.config.in_channels:
        raise ValueError(f"expected {model.config.in_channels} channels")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(batch.to(next(model.parameters()).dtype))
    finally:
        model.train(was_training)
    return F.softmax(logits, dim=1).permute(0, 2, 3, 1)


def save_checkpoint(path, model: UNet, **meta) -> Path:
    """Atomically write config + parameters (+ optional metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config": asdict(model.config), "state_dict": model.state_dict(), "meta": meta}
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path) -> tuple:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = UNet(UNetConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("meta", {})
