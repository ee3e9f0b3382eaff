"""Dense float tensors with a reverse-mode tape.

Every op records its parents and a closure that routes the incoming
gradient backward. Gradients accumulate into `.grad` until `zero_grad`.
Training runs in float32; gradient checking requires float64.
"""
from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_grad_enabled = True
_debug_checks = os.environ.get("PVILAB_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


def set_debug_checks(flag: bool) -> None:
    global _debug_checks
    _debug_checks = bool(flag)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for sampling/eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if np.iscomplexobj(arr):
            raise TypeError(f"complex tensors are not supported, got {arr.dtype}")
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"only float32/float64 tensors supported, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars wrap as constants of the same dtype
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Reverse pass from a scalar; accumulates into leaf `.grad`."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape).astype(a.dtype, copy=False))
        _accum(b, _unbroadcast(g, b.shape).astype(b.dtype, copy=False))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape).astype(a.dtype, copy=False))
        _accum(b, _unbroadcast(g * a.data, b.shape).astype(b.dtype, copy=False))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape).astype(a.dtype, copy=False))
        _accum(b, _unbroadcast(gb, b.shape).astype(b.dtype, copy=False))

    return _make(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). Composite of matmul and add."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def gelu(x: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(x.data / _SQRT2))
    data = x.data * phi

    def backward(g):
        dens = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, (g * (phi + x.data * dens)).astype(x.dtype, copy=False))

    return _make(data.astype(x.dtype, copy=False), (x,), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, (y * (g - inner)).astype(x.dtype, copy=False))

    return _make(y.astype(x.dtype, copy=False), (x,), backward)


def layernorm_lastdim(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last dim to mean 0 / variance 1; affine is the caller's job."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layernorm needs last dim >= 2, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (inv * (g - gm - xhat * gx)).astype(x.dtype, copy=False))

    return _make(xhat.astype(x.dtype, copy=False), (x,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mean_sq_error: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def backward(g):
        scale = 2.0 / diff.size
        _accum(pred, (g * scale * diff).astype(pred.dtype, copy=False))
        _accum(target, (-g * scale * diff).astype(target.dtype, copy=False))

    return _make(data, (pred, target), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False).copy())

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    inv = 1.0 / count
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, _wrap(inv, x.dtype))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, offsets, axis=axis)
        for t, p in zip(tensors, parts):
            _accum(t, p.astype(t.dtype, copy=False))

    return _make(data, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accum(x, full)

    return _make(data.copy(), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(data, (x,), backward)


# Registry keyed by contract op names; the gradcheck sweep iterates this.
OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "linear": linear,
    "softmax_lastdim": softmax_lastdim,
    "layernorm": layernorm_lastdim,
    "gelu": gelu,
    "mean_sq_error": mse,
    "concat_lastdim": concat,
    "slice": slice_axis,
}


# ---------------------------------------------------------------- gradcheck


def gradcheck(f, x: Tensor, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between the tape gradient of scalar f and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    `x` must be float64; float32 inputs are rejected. `max_coords` subsamples
    coordinates deterministically for large tensors.
    """
    if x.dtype != np.float64:
        raise TypeError(f"gradcheck requires a float64 tensor, got {x.dtype}")
    base = Tensor(x.data.copy(), requires_grad=True)
    y = f(base)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ShapeError("gradcheck needs f to return a scalar Tensor")
    y.backward()
    analytic = base.grad if base.grad is not None else np.zeros_like(base.data)
    analytic = analytic.reshape(-1)

    flat = x.data.reshape(-1).copy()
    n = flat.size
    idxs = np.arange(n)
    if max_coords is not None and max_coords < n:
        idxs = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
        idxs.sort()

    worst = 0.0
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig - h
            fm = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
