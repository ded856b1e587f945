"""Convolutional layers with exact backward passes.

All tensors are channel-major ``(batch, channel, height, width)``. Convolution
is cross-correlation with zero padding. Transposed convolution takes weights
shaped ``(in_channels, out_channels, kh, kw)`` and is the exact adjoint of
``conv2d`` with the same weight tensor, stride and padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make, relu

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    has_bias: bool = True
    # transposed convolution only: extra rows/cols kept at the bottom/right
    output_padding: Pair = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "output_padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be positive: {self}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride must be >= 1: {self}")
        if min(self.padding) < 0 or min(self.output_padding) < 0:
            raise ValueError(f"padding must be >= 0: {self}")
        if any(op >= s for op, s in zip(self.output_padding, self.stride)):
            raise ValueError("output_padding must be smaller than stride")

    def output_size(self, size: Pair) -> Pair:
        out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(size, self.padding, self.kernel, self.stride))
        if min(n + 2 * p - k for n, p, k in zip(size, self.padding, self.kernel)) < 0:
            raise ShapeError(f"kernel {self.kernel} larger than padded input {size} (padding {self.padding})")
        return out

    def transposed_output_size(self, size: Pair) -> Pair:
        out = tuple(
            (n - 1) * s - 2 * p + k + op
            for n, s, p, k, op in zip(size, self.stride, self.padding, self.kernel, self.output_padding)
        )
        if min(out) < 1:
            raise ShapeError(f"transposed convolution output size {out} is not positive")
        return out


# -- raw array kernels ------------------------------------------------------------

def _windows(xp: np.ndarray, kernel: Pair, stride: Pair) -> np.ndarray:
    win = sliding_window_view(xp, kernel, axis=(2, 3))
    return win[:, :, :: stride[0], :: stride[1]]


def _corr(xp: np.ndarray, w: np.ndarray, stride: Pair) -> np.ndarray:
    """Valid cross-correlation: (n,i,H,W) x (o,i,kh,kw) -> (n,o,oh,ow)."""
    win = _windows(xp, w.shape[2:], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_weight_grad(xp: np.ndarray, g: np.ndarray, kernel: Pair, stride: Pair) -> np.ndarray:
    win = _windows(xp, kernel, stride)[:, :, : g.shape[2], : g.shape[3]]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _corr_input_grad(g: np.ndarray, w: np.ndarray, stride: Pair, padded_shape) -> np.ndarray:
    """Adjoint of ``_corr`` with respect to its input."""
    kh, kw = w.shape[2:]
    sh, sw = stride
    oh, ow = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (n, oh, ow, i, kh, kw)
    dx = np.zeros(padded_shape, dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            dx[:, :, a : a + sh * oh : sh, b : b + sw * ow : sw] += cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return dx


def _pad(x: np.ndarray, padding: Pair) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad(x: np.ndarray, padding: Pair, size: Pair) -> np.ndarray:
    ph, pw = padding
    return x[:, :, ph : ph + size[0], pw : pw + size[1]]


# -- differentiable ops -------------------------------------------------------------

def _check_input(x: Tensor, channels: int, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected (n, c, h, w) input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, spec expects {channels}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    _check_input(x, spec.in_channels, "conv2d")
    expected = (spec.out_channels, spec.in_channels) + spec.kernel
    if weight.shape != expected:
        raise ShapeError(f"conv2d: weight shape {weight.shape}, expected {expected}")
    size = x.shape[2:]
    spec.output_size(size)
    xp = _pad(x.data, spec.padding)
    out = _corr(xp, weight.data, spec.stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    wd = weight.data

    def vjp(g):
        gx = _unpad(_corr_input_grad(g, wd, spec.stride, xp.shape), spec.padding, size)
        gw = _corr_weight_grad(xp, g, spec.kernel, spec.stride)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", inputs, vjp)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    _check_input(x, spec.in_channels, "transposed_conv2d")
    expected = (spec.in_channels, spec.out_channels) + spec.kernel
    if weight.shape != expected:
        raise ShapeError(f"transposed_conv2d: weight shape {weight.shape}, expected {expected}")
    out_size = spec.transposed_output_size(x.shape[2:])
    n, _, h, w = x.shape
    full_shape = (
        n,
        spec.out_channels,
        (h - 1) * spec.stride[0] + spec.kernel[0] + spec.output_padding[0],
        (w - 1) * spec.stride[1] + spec.kernel[1] + spec.output_padding[1],
    )
    wd = weight.data
    full = _corr_input_grad(x.data, wd, spec.stride, full_shape)
    out = np.ascontiguousarray(_unpad(full, spec.padding, out_size))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    xd = x.data

    def vjp(g):
        gfull = np.zeros(full_shape, dtype=g.dtype)
        ph, pw = spec.padding
        gfull[:, :, ph : ph + out_size[0], pw : pw + out_size[1]] = g
        gfull_valid = gfull[:, :, : (h - 1) * spec.stride[0] + spec.kernel[0], : (w - 1) * spec.stride[1] + spec.kernel[1]]
        gx = _corr(gfull_valid, wd, spec.stride)
        gw = _corr_weight_grad(gfull_valid, xd, spec.kernel, spec.stride)
        # gw comes out as (in, out, kh, kw), the transposed-weight layout
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "transposed_conv2d", inputs, vjp)


def maxpool2d(x: Tensor, kernel=2, stride=None, padding=0) -> Tensor:
    """Max pooling; ties route the gradient to the first element in row-major window order."""
    kernel = _pair(kernel)
    stride = kernel if stride is None else _pair(stride)
    padding = _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    size = x.shape[2:]
    if any(k > n + 2 * p for k, n, p in zip(kernel, size, padding)):
        raise ShapeError(f"maxpool2d: window {kernel} larger than padded input {size} (padding {padding})")
    xp = x.data
    if padding != (0, 0):
        xp = np.pad(xp, ((0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2), constant_values=-np.inf)
    win = _windows(xp, kernel, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, kernel[0] * kernel[1])
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    padded_shape = xp.shape

    def vjp(g):
        gx = np.zeros(padded_shape, dtype=g.dtype)
        for idx in range(kernel[0] * kernel[1]):
            a, b = divmod(idx, kernel[1])
            gx[:, :, a : a + stride[0] * oh : stride[0], b : b + stride[1] * ow : stride[1]] += np.where(arg == idx, g, 0)
        return (_unpad(gx, padding, size),)

    return _make(np.ascontiguousarray(out), "maxpool2d", (x,), vjp)


def downsample_half(x: Tensor) -> Tensor:
    """2x2 average pooling. Odd spatial sizes are first padded by replicating the last row/column."""
    if x.ndim != 4:
        raise ShapeError(f"downsample_half: expected 4-d input, got {x.shape}")
    h, w = x.shape[2:]
    ph, pw = h % 2, w % 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x.data
    out = (xp[:, :, 0::2, 0::2] + xp[:, :, 1::2, 0::2] + xp[:, :, 0::2, 1::2] + xp[:, :, 1::2, 1::2]) * x.dtype.type(0.25)

    def vjp(g):
        q = g * g.dtype.type(0.25)
        gp = np.repeat(np.repeat(q, 2, axis=2), 2, axis=3)
        if ph:
            gp[:, :, h - 1, :] += gp[:, :, h, :]
            gp = gp[:, :, :h, :]
        if pw:
            gp[:, :, :, w - 1] += gp[:, :, :, w]
            gp = gp[:, :, :, :w]
        return (np.ascontiguousarray(gp),)

    return _make(np.ascontiguousarray(out), "downsample_half", (x,), vjp)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.size


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running statistics
    are updated as ``running = momentum * running + (1 - momentum) * batch``
    (unbiased variance). In eval mode the running statistics are used and the
    op is an affine map of its input.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm2d: input {x.shape} does not match {state.channels} channels")
    gamma, beta = state.gamma, state.beta
    shape_c = (1, -1, 1, 1)
    dt = x.dtype.type
    if not state.training:
        scale = (gamma.data / np.sqrt(state.running_var + dt(state.eps))).astype(x.dtype)
        shift = (beta.data - state.running_mean * scale).astype(x.dtype)
        xd = x.data
        xhat = (xd - state.running_mean.reshape(shape_c)) / np.sqrt(state.running_var + dt(state.eps)).reshape(shape_c)
        out = xd * scale.reshape(shape_c) + shift.reshape(shape_c)

        def vjp_eval(g):
            return (g * scale.reshape(shape_c), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _make(out, "batchnorm2d", (x, gamma, beta), vjp_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ShapeError("batchnorm2d: training mode needs more than one value per channel")
    xd = x.data
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    invstd = (1.0 / np.sqrt(var + dt(state.eps))).astype(x.dtype)
    xhat = (xd - mu.reshape(shape_c)) * invstd.reshape(shape_c)
    out = xhat * gamma.data.reshape(shape_c) + beta.data.reshape(shape_c)

    mom = dt(state.momentum)
    state.running_mean = (mom * state.running_mean + (1 - mom) * mu).astype(state.running_mean.dtype)
    state.running_var = (mom * state.running_var + (1 - mom) * var * dt(m / (m - 1))).astype(state.running_var.dtype)
    gd = gamma.data

    def vjp(g):
        gsum = g.sum(axis=(0, 2, 3))
        gxsum = (g * xhat).sum(axis=(0, 2, 3))
        gx = (gd * invstd / m).reshape(shape_c) * (
            m * g - gsum.reshape(shape_c) - xhat * gxsum.reshape(shape_c)
        )
        return (gx, gxsum, gsum)

    return _make(out, "batchnorm2d", (x, gamma, beta), vjp)


# -- layer objects --------------------------------------------------------------------

class Module:
    """Container base: named parameters, buffers and a train/eval switch."""

    training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(())

    def _own_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = [(prefix + n, p) for n, p in self._own_parameters()]
        for name, child in self.children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = [(prefix + n, b) for n, b in self._own_buffers()]
        for name, child in self.children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        shape = (spec.out_channels, spec.in_channels, kh, kw)
        self.weight = Tensor(_uniform_fan_in(rng, shape, spec.in_channels * kh * kw, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if spec.has_bias else None

    def _own_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


class ConvTranspose2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        shape = (spec.in_channels, spec.out_channels, kh, kw)
        self.weight = Tensor(_uniform_fan_in(rng, shape, spec.in_channels * kh * kw, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if spec.has_bias else None

    def _own_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        return transposed_conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9, eps: float = 1e-5):
        self.state = BatchNormState.create(channels, dtype=dtype, momentum=momentum, eps=eps)

    def _own_parameters(self):
        yield "gamma", self.state.gamma
        yield "beta", self.state.beta

    def _own_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self.state, name, np.array(value, dtype=self.state.gamma.dtype))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        self.state.training = mode
        return self

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.state)


class ConvBNReLU(Module):
    """Bias-free convolution (plain or transposed) followed by batch norm and optional ReLU."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32, transposed: bool = False, activate: bool = True):
        layer = ConvTranspose2d if transposed else Conv2d
        self.conv = layer(spec, rng, dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype=dtype)
        self.activate = activate

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.activate else y


def module_dict(module: Module) -> Dict[str, Tensor]:
    return dict(module.named_parameters())
