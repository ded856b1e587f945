"""LinkNet, mini-LinkNet and their multi-scale variants.

Layout (``base`` = base channel width, ``B`` = number of encoder stages)::

    x ──7x7/2 conv─BN─ReLU──┬──(ms: concat with downsample_half(x), 1x1 conv)──3x3/2 maxpool
                            │
    encoder_0 .. encoder_{B-1}   each: 2 residual basic blocks, first one stride 2,
                                 channels base * 2**i
    decoder_{B-1} .. decoder_0   each: 1x1 reduce to m/4, 3x3/2 transposed conv, 1x1 expand;
                                 output of decoder_i is added to encoder_{i-1}
    head: 3x3/2 transposed conv -> base/2, 3x3 conv, 2x2/2 transposed conv -> 1, sigmoid

mini variants use ``B = 3`` (the widest stage and its decoder are dropped),
full variants ``B = 4``. Total down-sampling factor is ``2 ** (B + 2)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .nn import ConvBNReLU, Conv2d, ConvSpec, ConvTranspose2d, Module, downsample_half, maxpool2d
from .tensor import ShapeError, Tensor, concat, mul, relu, sigmoid

VARIANTS = ("linknet", "ms-linknet", "mini-linknet", "ms-mini-linknet")

# paper-faithful build settings
PAPER_BASE_CHANNELS = 64
DEFAULT_INPUT_SIZE = (256, 384)


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "mini-linknet"
    input_size: Tuple[int, int] = DEFAULT_INPUT_SIZE
    input_channels: int = 1
    base_channels: int = PAPER_BASE_CHANNELS
    encoder_blocks: Optional[int] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        expected = 3 if self.is_mini else 4
        if self.encoder_blocks is None:
            object.__setattr__(self, "encoder_blocks", expected)
        elif self.encoder_blocks != expected:
            raise ValueError(f"variant {self.variant} needs {expected} encoder blocks, got {self.encoder_blocks}")
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.input_channels < 1 or self.base_channels < 2:
            raise ValueError("input_channels must be >= 1 and base_channels >= 2")
        div = self.divisor
        h, w = self.input_size
        if h % div or w % div or h < div or w < div:
            raise ValueError(f"input size {h}x{w} must be a positive multiple of {div} for {self.variant}")

    @property
    def is_mini(self) -> bool:
        return "mini" in self.variant

    @property
    def multiscale(self) -> bool:
        return self.variant.startswith("ms-")

    @property
    def divisor(self) -> int:
        return 2 ** (self.encoder_blocks + 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng, dtype):
        self.conv1 = ConvBNReLU(ConvSpec(cin, cout, 3, stride, 1, has_bias=False), rng, dtype)
        self.conv2 = ConvBNReLU(ConvSpec(cout, cout, 3, 1, 1, has_bias=False), rng, dtype, activate=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = ConvBNReLU(ConvSpec(cin, cout, 1, stride, 0, has_bias=False), rng, dtype, activate=False)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.conv1(x))
        skip = x if self.shortcut is None else self.shortcut(x)
        return relu(y + skip)


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, rng, dtype):
        self.blocks = [BasicBlock(cin, cout, 2, rng, dtype), BasicBlock(cout, cout, 1, rng, dtype)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class DecoderBlock(Module):
    def __init__(self, cin: int, cout: int, rng, dtype):
        mid = max(1, cin // 4)
        self.reduce = ConvBNReLU(ConvSpec(cin, mid, 1, 1, 0, has_bias=False), rng, dtype)
        self.up = ConvBNReLU(ConvSpec(mid, mid, 3, 2, 1, has_bias=False, output_padding=1), rng, dtype, transposed=True)
        self.expand = ConvBNReLU(ConvSpec(mid, cout, 1, 1, 0, has_bias=False), rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.expand(self.up(self.reduce(x)))


class Network(Module):
    """Instantiated layer graph; see the module docstring for the layout."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        base, cin = config.base_channels, config.input_channels
        dt = self.dtype

        self.initial = ConvBNReLU(ConvSpec(cin, base, 7, 2, 3, has_bias=False), rng, dt)
        self.fuse = None
        if config.multiscale:
            self.fuse = ConvBNReLU(ConvSpec(base + cin, base, 1, 1, 0, has_bias=False), rng, dt)

        widths = [base * 2**i for i in range(config.encoder_blocks)]
        self.encoders = [EncoderStage(c_in, c_out, rng, dt) for c_in, c_out in zip([base] + widths[:-1], widths)]
        self.decoders = [DecoderBlock(c_out, c_in, rng, dt) for c_in, c_out in zip([base] + widths[:-1], widths)]

        half = max(1, base // 2)
        self.head_up = ConvBNReLU(ConvSpec(base, half, 3, 2, 1, has_bias=False, output_padding=1), rng, dt, transposed=True)
        self.head_conv = ConvBNReLU(ConvSpec(half, half, 3, 1, 1, has_bias=False), rng, dt)
        self.head_out = ConvTranspose2d(ConvSpec(half, 1, 2, 2, 0, has_bias=True), rng, dt)

    def forward(self, x: Tensor, zero_half_scale: bool = False) -> Tensor:
        """Probability map ``(n, 1, h, w)``.

        ``zero_half_scale`` replaces the half-resolution image branch with zeros
        (ablation hook); it has no effect on single-scale variants.
        """
        cfg = self.config
        expected = (cfg.input_channels,) + cfg.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"network expects (n, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad) if x.is_leaf else x
        y = self.initial(x)
        if self.fuse is not None:
            small = downsample_half(x)
            if zero_half_scale:
                small = mul(small, 0.0)
            y = self.fuse(concat([y, small], axis=1))
        y = maxpool2d(y, 3, 2, 1)

        skips = []
        for enc in self.encoders:
            skips.append(y)
            y = enc(y)
        # skips[i] is the input of encoder i, i.e. the output of encoder i-1
        for i in reversed(range(len(self.decoders))):
            y = self.decoders[i](y)
            if i > 0:
                y = y + skips[i]
        y = self.head_conv(self.head_up(y))
        return sigmoid(self.head_out(y))


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(config, seed=seed, dtype=dtype)


def forward(net: Network, batch: Tensor, zero_half_scale: bool = False) -> Tensor:
    return net.forward(batch, zero_half_scale=zero_half_scale)


def count_parameters(net: Module) -> int:
    """Number of trainable scalars (conv weights/biases, batch-norm gamma/beta)."""
    return int(sum(p.size for p in net.parameters()))


# -- checkpoints ------------------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic      8 bytes  b"HCSEGCKP"
#   version    uint32   CHECKPOINT_VERSION
#   header_len uint32   length of the UTF-8 JSON header that follows
#   header     JSON     {"config": {...}, "seed": int, "dtype": "float32"|"float64",
#                        "count": number of tensor entries, "extra": {...}}
#   entries    repeated `count` times:
#       name_len uint16, name UTF-8 bytes,
#       kind     uint8   (0 = trainable parameter, 1 = buffer)
#       dtype    uint8   (0 = float32, 1 = float64)
#       ndim     uint8,  dims ndim * uint32,
#       data     prod(dims) little-endian values, row-major

CHECKPOINT_MAGIC = b"HCSEGCKP"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(net: Network, extra: Optional[dict] = None) -> bytes:
    entries = [(n, 0, p.data) for n, p in net.named_parameters()]
    entries += [(n, 1, b) for n, b in net.named_buffers()]
    header = {
        "config": net.config.to_dict(),
        "seed": net.seed,
        "dtype": np.dtype(net.dtype).name,
        "count": len(entries),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)), hbytes]
    for name, kind, arr in entries:
        nb = name.encode("utf-8")
        code = _DTYPE_CODES[arr.dtype]
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BBB", kind, code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


def save_checkpoint(path, net: Network, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, extra))
    return path


def read_checkpoint(path) -> Tuple[dict, List[Tuple[str, int, np.ndarray]]]:
    """Parse a checkpoint into its header and ``(name, kind, array)`` entries."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    entries = []
    for _ in range(header["count"]):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        kind, code, ndim = struct.unpack_from("<BBB", raw, pos)
        pos += 3
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims)) * dt.itemsize
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims)
        pos += nbytes
        entries.append((name, kind, arr.astype(dt.newbyteorder("="))))
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, entries


def load_checkpoint(path) -> Tuple[Network, dict]:
    header, entries = read_checkpoint(path)
    config = NetworkConfig.from_dict(header["config"])
    net = Network(config, seed=header["seed"], dtype=np.dtype(header["dtype"]))
    params = dict(net.named_parameters())
    modules = _buffer_owners(net)
    for name, kind, arr in entries:
        if kind == 0:
            if name not in params or params[name].shape != arr.shape:
                raise CheckpointError(f"parameter {name!r} does not match the {config.variant} layout")
            params[name].data[...] = arr
        else:
            owner, _, buf = name.rpartition(".")
            if owner not in modules:
                raise CheckpointError(f"unknown buffer {name!r}")
            modules[owner].set_buffer(buf, arr)
    return net, header.get("extra", {})


def _buffer_owners(net: Module) -> dict:
    owners = {}

    def walk(mod: Module, prefix: str):
        if any(True for _ in mod._own_buffers()):
            owners[prefix.rstrip(".")] = mod
        for name, child in mod.children():
            walk(child, f"{prefix}{name}.")

    walk(net, "")
    return owners
