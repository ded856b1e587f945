import numpy as np
import pytest

from hcseg.losses import l_ln
from hcseg.segnet import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    NetworkConfig,
    build_network,
    checkpoint_bytes,
    count_parameters,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from hcseg.tensor import ShapeError, Tensor, high_precision


def hand_count(base, blocks, multiscale=False, cin=1):
    """Parameter count tallied layer by layer from the architecture description."""
    conv = lambda i, o, k: i * o * k * k  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    total = conv(cin, base, 7) + bn(base)
    if multiscale:
        total += conv(base + cin, base, 1) + bn(base)
    widths = [base * 2**i for i in range(blocks)]
    for c_in, c_out in zip([base] + widths[:-1], widths):
        # two basic blocks, the first with a 1x1 projection shortcut
        total += conv(c_in, c_out, 3) + bn(c_out) + conv(c_out, c_out, 3) + bn(c_out) + conv(c_in, c_out, 1) + bn(c_out)
        total += 2 * (conv(c_out, c_out, 3) + bn(c_out))
        mid = max(1, c_out // 4)
        total += conv(c_out, mid, 1) + bn(mid) + conv(mid, mid, 3) + bn(mid) + conv(mid, c_in, 1) + bn(c_in)
    half = base // 2
    total += conv(base, half, 3) + bn(half) + conv(half, half, 3) + bn(half) + conv(half, 1, 2) + 1
    return total


@pytest.mark.parametrize("variant,blocks", [("linknet", 4), ("mini-linknet", 3), ("ms-linknet", 4), ("ms-mini-linknet", 3)])
def test_parameter_count_matches_hand_tally(variant, blocks):
    net = build_network(NetworkConfig(variant, (64, 64), base_channels=16))
    assert count_parameters(net) == hand_count(16, blocks, variant.startswith("ms-"))


@pytest.mark.parametrize("variant", ["linknet", "mini-linknet", "ms-linknet", "ms-mini-linknet"])
def test_output_shape_and_range(variant):
    cfg = NetworkConfig(variant, (64, 128), base_channels=4)
    net = build_network(cfg, seed=3)
    out = net(Tensor(np.random.default_rng(0).random((2, 1, 64, 128)).astype(np.float32))).data
    assert out.shape == (2, 1, 64, 128)
    assert np.all((out > 0) & (out < 1))


def test_input_size_must_be_divisible():
    with pytest.raises(ValueError, match="multiple of 32"):
        NetworkConfig("mini-linknet", (48, 64))
    with pytest.raises(ValueError, match="multiple of 64"):
        NetworkConfig("linknet", (96, 64))
    with pytest.raises(ValueError):
        NetworkConfig("unet")
    with pytest.raises(ValueError):
        NetworkConfig("linknet", encoder_blocks=3)


def test_forward_rejects_wrong_input_shape():
    net = build_network(NetworkConfig("mini-linknet", (32, 32), base_channels=4))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 1, 32, 64), np.float32)))


def test_same_seed_same_weights():
    cfg = NetworkConfig("ms-mini-linknet", (32, 32), base_channels=4)
    a, b, c = build_network(cfg, seed=5), build_network(cfg, seed=5), build_network(cfg, seed=6)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_end_to_end_gradient_through_network():
    cfg = NetworkConfig("ms-mini-linknet", (32, 32), base_channels=4)
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((2, 1, 32, 32)))
    gt = np.zeros((2, 1, 32, 32))
    gt[:, :, 8:24, 6:26] = 1.0
    with high_precision():
        net = build_network(cfg, seed=0, dtype=np.float64)
        params = dict(net.named_parameters())
        for name in ("head_out.weight", "head_out.bias", "fuse.bn.gamma", "initial.conv.weight"):
            p = params[name]
            count = min(p.size, 12)

            def analytic(p=p, count=count):
                net.zero_grad()
                l_ln(net(x), gt).backward()
                return p.grad.reshape(-1)[:count].copy()

            want = analytic()
            numeric = np.zeros_like(want)
            for i in range(count):
                orig = p.data.reshape(-1)[i]
                p.data.reshape(-1)[i] = orig + 1e-6
                up = l_ln(net(x), gt).item()
                p.data.reshape(-1)[i] = orig - 1e-6
                down = l_ln(net(x), gt).item()
                p.data.reshape(-1)[i] = orig
                numeric[i] = (up - down) / 2e-6
            scale = np.maximum(np.abs(want), 1e-3)
            assert np.max(np.abs(want - numeric) / scale) < 1e-4, name


def test_checkpoint_roundtrip(tmp_path):
    cfg = NetworkConfig("ms-mini-linknet", (32, 32), base_channels=4)
    net = build_network(cfg, seed=2)
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32))
    net(x)  # moves the running statistics off their initial values
    net.eval()
    path = save_checkpoint(tmp_path / "m.ckpt", net, extra={"epoch": 7})
    back, extra = load_checkpoint(path)
    back.eval()
    assert extra == {"epoch": 7}
    assert back.config == cfg
    np.testing.assert_array_equal(back(x).data, net(x).data)
    assert checkpoint_bytes(back, extra) == path.read_bytes()


def test_checkpoint_layout_header(tmp_path):
    net = build_network(NetworkConfig("mini-linknet", (32, 32), base_channels=4))
    path = save_checkpoint(tmp_path / "m.ckpt", net)
    raw = path.read_bytes()
    assert raw[:8] == CHECKPOINT_MAGIC
    header, entries = read_checkpoint(path)
    assert header["count"] == len(entries)
    assert sum(a.size for _, kind, a in entries if kind == 0) == count_parameters(net)


def test_checkpoint_rejects_corruption(tmp_path):
    net = build_network(NetworkConfig("mini-linknet", (32, 32), base_channels=4))
    raw = checkpoint_bytes(net)
    (tmp_path / "bad_magic").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "trailing").write_bytes(raw + b"\0")
    for name in ("bad_magic", "trailing"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
