"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Tape` records one node per primitive operation, in execution order;
`Tape.backward` replays the nodes in reverse insertion order exactly once,
accumulating vector-Jacobian products into `Tensor.grad`. Execution order is
a valid topological order by construction, so no graph sort is needed.

Ops executed while no tape is active just compute forward values (used for
evaluation). Every op output is checked for NaN/Inf and raises
`NumericalError` on violation. All data is float64, C-contiguous.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


def _check_finite(data: np.ndarray, op: str) -> None:
    # cheap single-pass probe; NaN/Inf propagate into the sum
    s = float(np.sum(data))
    if not np.isfinite(s) and not bool(np.isfinite(data).all()):
        raise NumericalError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float64 array node. Immutable data once created, except for
    in-place parameter updates performed by the optimizer between tapes."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant Tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return tslice(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of executed ops; a context manager.

    Single-threaded by contract: one tape per thread, nested tapes are not
    allowed. Distinct tapes on distinct threads are independent.
    """

    def __init__(self):
        self.nodes = []  # (out, inputs, vjp)

    def __enter__(self):
        if _active_tape() is not None:
            raise UsageError("a Tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` into every recorded tensor that
        requires grad. `loss` must be a scalar produced on this tape."""
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self or not loss._recorded:
            raise UsageError("backward on a tensor detached from this tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = vjp(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g if g.shape == t.data.shape else np.broadcast_to(g, t.data.shape).copy()
                else:
                    t.grad = t.grad + g


def _make(data: np.ndarray, inputs, vjp, op: str) -> Tensor:
    """Register an op result: finite check, grad propagation, tape node."""
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        out._recorded = True
        tape.nodes.append((out, tuple(inputs), vjp))
    return out


def defop(data: np.ndarray, inputs, vjp, op: str = "custom") -> Tensor:
    """Public hook for modules that define their own primitives."""
    return _make(data, inputs, vjp, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / b.data

    def vjp(g):
        return (
            _unbroadcast(g * inv, a.data.shape),
            _unbroadcast(-g * a.data * inv * inv, b.data.shape),
        )

    return _make(a.data * inv, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _make(-a.data, (a,), vjp, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


# ------------------------------------------------------------- element-wise


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), vjp, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp, "tanh")


def atanh(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.arctanh(a.data)

    def vjp(g):
        return (g / (1.0 - a.data * a.data),)

    return _make(out, (a,), vjp, "atanh")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        # d softplus = sigmoid
        return (g / (1.0 + np.exp(-a.data)),)

    return _make(out, (a,), vjp, "softplus")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), vjp, "sqrt")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values to [lo, hi]. Gradient passes where unclamped, zero where
    clamped."""
    out = np.clip(a.data, lo, hi)
    passed = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        passed &= a.data > lo
    if hi is not None:
        passed &= a.data < hi
    inside = passed | (out == a.data)

    def vjp(g):
        return (g * inside,)

    return _make(out, (a,), vjp, "clamp")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp, "softmax")


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "mean")


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm along the last axis, keepdims. Gradient uses a tiny
    floor so the origin does not divide by zero."""
    out = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g * a.data / np.maximum(out, 1e-300),)

    return _make(out, (a,), vjp, "l2_norm")


# ------------------------------------------------------------ shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), vjp, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(ax)

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.data.transpose(ax)), (a,), vjp, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def tslice(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), vjp, "slice")


# -------------------------------------------------------- neural net kernels

from . import kernels as _k  # noqa: E402  (import late: kernels are leaf deps)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1D convolution, stride 1, zero-padded 'same' output length.

    x: (B, C_in, L), w: (C_out, C_in, K) with odd K, b: (C_out,).
    """
    if x.data.ndim != 3 or w.data.ndim != 3 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.data.shape} and {w.data.shape}")
    out = _k.impl.conv1d_forward(x.data, w.data, b.data)

    def vjp(g):
        dx, dw, db = _k.impl.conv1d_backward(x.data, w.data, np.ascontiguousarray(g))
        return dx, dw, db

    return _make(out, (x, w, b), vjp, "conv1d")


def maxpool1d(x: Tensor) -> Tensor:
    """Max pooling with kernel 2, stride 2; ties route the gradient to the
    lower index. Length must be even."""
    if x.data.ndim != 3 or x.data.shape[2] % 2 != 0:
        raise ShapeError(f"maxpool1d: need (B, C, even L), got {x.data.shape}")
    out, idx = _k.impl.maxpool1d_forward(x.data)

    def vjp(g):
        return (_k.impl.maxpool1d_backward(np.ascontiguousarray(g), idx, x.data.shape[2]),)

    return _make(out, (x,), vjp, "maxpool1d")
