import numpy as np
import pytest
import torch

from agetrace.unet import UNetConfig, build_model, forward, load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def small_model():
    return build_model(UNetConfig(base_width=4), seed=0)


def test_architecture_layout():
    model = build_model(UNetConfig(base_width=64))
    assert len(model.down) == 4 and len(model.up) == 4
    assert model.num_skips == 4
    widths = [blk.convs[0].out_channels for blk in model.down]
    assert widths == [64, 128, 256, 512]
    assert model.bottleneck[-3].out_channels == 1024
    convs = [m for m in model.down[0].convs if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 2 and isinstance(model.down[0].pool, torch.nn.MaxPool2d)
    up = model.up[0]
    assert isinstance(up.up, torch.nn.ConvTranspose2d)
    assert sum(isinstance(m, torch.nn.Conv2d) for m in up.convs) == 2
    assert model.head.out_channels == 6


@pytest.mark.parametrize("size", [384, 1024])
def test_output_shape(size):
    model = build_model(UNetConfig(base_width=2))
    x = torch.zeros(1, 3, size, size)
    with torch.no_grad():
        assert model.eval()(x).shape == (1, 6, size, size)


def test_indivisible_dims_rejected(small_model):
    with pytest.raises(ValueError):
        small_model(torch.zeros(1, 3, 40, 48))


def test_depth_is_fixed():
    with pytest.raises(ValueError):
        UNetConfig(depth=3)


def test_forward_normalized_and_deterministic(small_model):
    rng = np.random.default_rng(0)
    batch = rng.integers(0, 256, (2, 32, 32, 3), dtype=np.uint8)
    s1 = forward(small_model, batch)
    s2 = forward(small_model, batch)
    assert s1.shape == (2, 32, 32, 6)
    np.testing.assert_allclose(s1.sum(-1).numpy(), 1.0, atol=1e-5)
    assert float(s1.min()) >= 0 and float(s1.max()) <= 1
    assert torch.equal(s1, s2)


def test_forward_rejects_wrong_channels(small_model):
    with pytest.raises(ValueError):
        forward(small_model, torch.zeros(1, 4, 32, 32))


def test_seeded_init_reproducible():
    a = build_model(UNetConfig(base_width=4), seed=3)
    b = build_model(UNetConfig(base_width=4), seed=3)
    c = build_model(UNetConfig(base_width=4), seed=4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_checkpoint_roundtrip(tmp_path, small_model):
    path = save_checkpoint(tmp_path / "run" / "step0.ckpt", small_model, trace_step=0)
    model, meta = load_checkpoint(path)
    assert meta == {"trace_step": 0}
    assert model.config == small_model.config
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(forward(model, x), forward(small_model, x))
    assert not list(path.parent.glob("*.tmp"))
