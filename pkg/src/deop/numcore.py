"""Dense float64 tensors with a reverse-mode gradient tape.

Every public operation takes and returns :class:`Tensor`. Operations are
recorded on the innermost active :class:`GradTape` whenever at least one input
requires a gradient. Shapes must agree exactly; the only implicit expansion is
tensor-scalar (``scale``/``add_scalar``). Row/column expansions are explicit
ops (``add_bias``, ``scale_rows``, ``scale_channels``).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradTape", "ShapeError", "ContractError", "NonFiniteError",
    "matmul", "add", "sub", "mul", "div", "scale", "add_scalar", "neg",
    "add_bias", "scale_rows", "scale_channels", "exp", "log", "sqrt",
    "reciprocal", "sigmoid", "relu", "gelu", "clamp", "softmax", "log_softmax",
    "layer_norm", "batch_norm", "l2_normalize_rows", "reshape", "transpose",
    "sum", "mean", "concat", "stack", "index", "conv2d", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity was produced or supplied."""


_local = threading.local()


def _tapes() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value in {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, where: str) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        _check_finite(arr, where)
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, "detach")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)
    def __getitem__(self, key): return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records operations in application order and replays them backward.

    A tape is single-threaded; use one per training step::

        with GradTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "GradTape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().pop()

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.size != 1:
            raise ContractError(f"gradient requires a scalar loss, got shape {loss.shape}")
        keep = {id(s) for s in sources}
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self.ops):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        return [grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources]


def _result(arr: np.ndarray, inputs: tuple, backward: Callable, name: str) -> Tensor:
    out = Tensor._wrap(arr, name)
    stack = _tapes()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].ops.append((out, inputs, backward))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[..., m, k]`` and ``[..., k, n]`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(B, -1, -2) if a.requires_grad else None,
                np.swapaxes(A, -1, -2) @ g if b.requires_grad else None)

    return _result(A @ B, (a, b), backward, "matmul")


# ----------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    A, B = a.data, b.data
    if (B == 0).any():
        raise ContractError("div: zero in denominator")
    return _result(A / B, (a, b), lambda g: (g / B, -g * A / (B * B)), "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _result(a.data + float(s), (a,), lambda g: (g,), "add_scalar")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` has the shape of ``x``'s last axis."""
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply every last-axis vector of ``x`` by the matching scalar of ``w``."""
    if w.shape != x.shape[:-1]:
        raise ShapeError(f"scale_rows: weights {w.shape} do not match {x.shape[:-1]}")
    X, W = x.data, w.data[..., None]
    return _result(X * W, (x, w), lambda g: (g * W, (g * X).sum(axis=-1)), "scale_rows")


def scale_channels(x: Tensor, v: Tensor) -> Tensor:
    """Multiply ``x`` by ``v`` along the last axis."""
    if v.shape != x.shape[-1:]:
        raise ShapeError(f"scale_channels: {v.shape} does not match last axis of {x.shape}")
    X, V = x.data, v.data
    lead = tuple(range(x.ndim - 1))
    return _result(X * V, (x, v), lambda g: (g * V, (g * X).sum(axis=lead)), "scale_channels")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    X = x.data
    if (X <= 0).any():
        raise ContractError("log: non-positive input")
    return _result(np.log(X), (x,), lambda g: (g / X,), "log")


def sqrt(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ContractError("sqrt: non-positive input")
    y = np.sqrt(x.data)
    return _result(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def reciprocal(x: Tensor) -> Tensor:
    X = x.data
    if (X == 0).any():
        raise ContractError("reciprocal: zero input")
    y = 1.0 / X
    return _result(y, (x,), lambda g: (-g * y * y,), "reciprocal")


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _result(x.data * m, (x,), lambda g: (g * m,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    X = x.data
    u = _GELU_C * (X + 0.044715 * X * X * X)
    t = np.tanh(u)
    y = 0.5 * X * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return _result(y, (x,), backward, "gelu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    X = x.data
    inside = (X >= lo) & (X <= hi)
    return _result(np.clip(X, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- normalizers

def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=ax, keepdims=True)),),
                   "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {d}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * G
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * G + beta.data, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel (last axis) with statistics over all other axes."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} vs channels {c}")
    lead = tuple(range(x.ndim - 1))
    X = x.data
    mu = X.mean(axis=lead)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=lead) + eps)
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        gh = g * G
        gx = inv * (gh - gh.mean(axis=lead) - xhat * (gh * xhat).mean(axis=lead))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * G + beta.data, (x, gamma, beta), backward, "batch_norm")


def l2_normalize_rows(x: Tensor, tiny: float = 1e-12) -> Tensor:
    """Unit-normalize last-axis vectors; rows with norm below ``tiny`` map to zero."""
    X = x.data
    n = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    ok = n >= tiny
    inv = np.where(ok, 1.0 / np.where(ok, n, 1.0), 0.0)
    y = X * inv

    def backward(g):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "l2_normalize_rows")


# ------------------------------------------------------------------- structure

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def sum(x: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    s = sum(x, axis=axis, keepdims=keepdims)
    return scale(s, s.size / x.size)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    ax = _axis(xs[0], axis)
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[u.shape for u in xs]} disagree off axis {ax}")
    cuts = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=ax), xs,
                   lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    for t in xs[1:]:
        _same_shape(xs[0], t, "stack")
    ax = axis % (xs[0].ndim + 1)
    return _result(np.stack([t.data for t in xs], axis=ax), xs,
                   lambda g: tuple(np.moveaxis(g, ax, 0)), "stack")


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    shape = x.shape
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in parts)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _result(x.data[key], (x,), backward, "index")


# ------------------------------------------------------------------ convolution

def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Channels-last convolution: ``x[B,H,W,C]``, ``w[k,k,C,O]`` -> ``[B,Ho,Wo,O]``."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} vs {w.shape[3]} output channels")
    k, _, C, O = w.shape
    B, H, W, _ = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape} with pad {pad}")
    xp = _pad_hw(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :Ho, :Wo]          # B,Ho,Wo,C,k,k
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C)
    Wm = w.data.reshape(k * k * C, O)
    y = (cols @ Wm).reshape(B, Ho, Wo, O)
    if b is not None:
        y = y + b.data

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, O)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ Wm.T).reshape(B, Ho, Wo, k, k, C)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
            gx = gxp[:, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _result(y, inputs, backward, "conv2d")


# -------------------------------------------------------------- gradient check

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between tape and central-difference gradients of ``f`` at ``x``.

    The error per coordinate is ``|fd - ad| / max(1, |fd|, |ad|)``. ``coords``
    restricts the check to a subset of flat indices.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    probe = Tensor(x.data, requires_grad=True)
    with GradTape() as tape:
        out = f(probe)
    if out.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    (ad,) = tape.gradient(out, [probe])
    ad = ad.reshape(-1)
    base = x.data.reshape(-1)
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = f(Tensor(plus.reshape(x.shape))).item()
        fm = f(Tensor(minus.reshape(x.shape))).item()
        fd = (fp - fm) / (2 * eps)
        err = abs(fd - ad[i]) / max(1.0, abs(fd), abs(ad[i]))
        worst = max(worst, err)
    return worst
