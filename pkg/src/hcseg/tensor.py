"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and, when produced by a differentiable
operation, a :class:`Node` recording the inputs and a closure computing the
vector-Jacobian product. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates gradients into leaves that require them.

Two precisions are supported: ``float64`` ("high", used by gradient checks and
oracles) and ``float32`` ("standard", used for training). Operations preserve
the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

HIGH = np.float64
STANDARD = np.float32

LOG_EPS = 1e-7

_default_dtype = STANDARD
_grad_enabled = True

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (HIGH, STANDARD):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def high_precision() -> Iterator[None]:
    """Temporarily make float64 the default dtype for new tensors."""
    previous = _default_dtype
    set_default_dtype(HIGH)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    """Graph record of the operation that produced a tensor."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: Sequence["Tensor"], vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        # returns one gradient (or None) per input
        self.vjp = vjp


class Tensor:
    """Dense n-dimensional array with optional gradient and graph linkage."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None) -> "Tensor":
        return sum(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return mean(self, axes)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if _is_scalar(b):
        return _make(a.data + a.dtype.type(b), "add", (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if _is_scalar(b):
        return _make(a.data - a.dtype.type(b), "sub", (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if _is_scalar(b):
        s = a.dtype.type(b)
        return _make(a.data * s, "mul", (a,), lambda g: (g * s,))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """Elementwise quotient. The divisor must be bounded away from zero by the caller."""
    if _is_scalar(b):
        if b == 0:
            raise ZeroDivisionError("div: scalar divisor is zero")
        s = a.dtype.type(b)
        return _make(a.data / s, "div", (a,), lambda g: (g / s,))
    _check_same_shape("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor tensor contains zeros")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "div", (a, b), lambda g: (g / bd, -g * out / bd))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    out = np.clip(a.data, lo_v, hi_v).astype(a.dtype)
    inside = (a.data >= lo_v) & (a.data <= hi_v)
    return _make(out, "clamp", (a,), lambda g: (g * inside,))


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(a, eps)``; the clamp is not optional."""
    if eps <= 0:
        raise ValueError("log: eps must be positive")
    x = clamp(a, lo=eps)
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


# -- reductions ---------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def sum(a: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ax = _normalize_axes(axes, a.ndim)
    out = a.data.sum(axis=ax, keepdims=True)
    kept_shape = out.shape
    out = out.reshape([d for i, d in enumerate(a.shape) if i not in ax] or [1])
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept_shape), shape).copy(),)

    return _make(out, "sum", (a,), vjp)


def mean(a: Tensor, axes=None) -> Tensor:
    ax = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax]))
    return mul(sum(a, ax), 1.0 / count)


# -- structural ---------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat along axis {ax}: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def vjp(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * nd
            idx[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(idx)])
        return grads

    return _make(out, "concat", tuple(tensors), vjp)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] invalid for axis {ax} of size {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), "slice", (a,), vjp)


# -- backward -----------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    grads = {id(loss): seed}
    for t in reversed(_topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def gradcheck(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps ``point`` to a scalar tensor. ``point.data`` is perturbed in
    place and restored. The relative error for each coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if step <= 0:
        raise ValueError("gradcheck: step must be positive")
    saved_flag, saved_grad = point.requires_grad, point.grad
    point.requires_grad = True
    point.grad = None
    out = fn(point)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("gradcheck: function output is not finite")
    out.backward()
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn(point).item()
        flat[i] = orig - step
        minus = fn(point).item()
        flat[i] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise FloatingPointError(f"gradcheck: non-finite output at coordinate {i}")
        num_flat[i] = (plus - minus) / (2 * step)

    point.requires_grad, point.grad = saved_flag, saved_grad
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
