"""Differentiable primitives.

Every op computes its forward value with numpy and, when a trace is active
and some input requires a gradient, records a closure that maps the
upstream gradient to one gradient per input.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from satlab.autodiff.tensor import DomainError, ShapeError, Tensor, active_trace

__all__ = [
    "UNARY_RULES",
    "add",
    "cross_entropy_mean",
    "div",
    "embedding_lookup",
    "ew_binary",
    "index",
    "ew_unary",
    "matmul",
    "mean",
    "mul",
    "reshape",
    "rms_norm",
    "rope_apply",
    "softmax_lastdim",
    "sub",
    "sum",
    "token_nll",
    "transpose",
]


def _emit(kind: str, inputs: tuple, data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(data)
    trace = active_trace()
    if trace is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        trace.record(kind, inputs, out, backward)
    return out


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a} and {b} are not broadcastable") from None


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul batch")
    A, B = a.data, b.data
    flat = B.ndim == 2 and A.ndim > 2
    if flat:
        # one large GEMM instead of a loop over the batch extents
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[1],))
    else:
        out = A @ B

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ B.T).reshape(A.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        if b.requires_grad:
            if B.ndim == 2:
                k, n = B.shape
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


# ---------------------------------------------------------------------------
# elementwise unary


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_inner(x):
    # x ** 3 is an order of magnitude slower than repeated products in float32
    u = x * x
    u *= x
    u *= 0.044715
    u += x
    u *= _GELU_C
    return np.tanh(u, out=u)


def _gelu(x):
    y = _gelu_inner(x)
    y += 1.0
    y *= x
    y *= 0.5
    return y


def _gelu_grad(x, y):
    t = _gelu_inner(x)
    # 0.5 * (1 + t) + 0.5 * x * (1 - t^2) * c * (1 + 3 * 0.044715 * x^2)
    inner = x * x
    inner *= 3 * 0.044715
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    inner *= sech2
    inner += t
    inner += 1.0
    inner *= 0.5
    return inner


def _log(x):
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(x)


# name -> (forward(x), local derivative(x, y))
UNARY_RULES: dict[str, tuple[Callable, Callable]] = {
    "relu": (lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype)),
    "sigmoid": (_sigmoid, lambda x, y: y * (1 - y)),
    "tanh": (np.tanh, lambda x, y: 1 - y * y),
    "identity": (lambda x: x.copy(), lambda x, y: np.ones_like(x)),
    "gelu": (_gelu, _gelu_grad),
    "exp": (np.exp, lambda x, y: y),
    "log": (_log, lambda x, y: 1 / x),
    "neg": (np.negative, lambda x, y: -np.ones_like(x)),
}


def ew_unary(kind: str, a: Tensor) -> Tensor:
    try:
        fwd, deriv = UNARY_RULES[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    x = a.data
    y = fwd(x).astype(x.dtype, copy=False)

    def backward(g):
        return (g * deriv(x, y),)

    return _emit(kind, (a,), y, backward)


# ---------------------------------------------------------------------------
# elementwise binary


def ew_binary(kind: str, a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _broadcast_shape(a.shape, b.shape, kind)
    x, y = a.data, b.data
    if kind == "add":
        out = x + y

        def backward(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    elif kind == "sub":
        out = x - y

        def backward(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    elif kind == "mul":
        out = x * y

        def backward(g):
            ga = _unbroadcast(g * y, x.shape) if a.requires_grad else None
            gb = _unbroadcast(g * x, y.shape) if b.requires_grad else None
            return ga, gb

    elif kind == "div":
        if np.any(y == 0):
            raise DomainError("division by zero")
        out = x / y

        def backward(g):
            ga = _unbroadcast(g / y, x.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * x / (y * y), y.shape) if b.requires_grad else None
            return ga, gb

    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return _emit(kind, (a, b), out, backward)


def add(a, b) -> Tensor:
    return ew_binary("add", a, b)


def sub(a, b) -> Tensor:
    return ew_binary("sub", a, b)


def mul(a, b) -> Tensor:
    return ew_binary("mul", a, b)


def div(a, b) -> Tensor:
    return ew_binary("div", a, b)


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _emit("transpose", (a,), out, lambda g: (g.transpose(inverse),))


def index(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; the gradient scatters back into zeros."""
    out = np.array(a.data[key])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _emit("index", (a,), out, backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", (a,), out, backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# softmax, normalization, lookup, loss, rotary


def softmax_lastdim(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) sends excluded entries to
    exactly zero probability. Every row must keep at least one entry.
    """
    if mask is None:
        y = a.data.copy()
    else:
        y = a.data + np.where(mask, 0.0, -np.inf).astype(a.dtype)
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g - (g * y).sum(axis=-1, keepdims=True)
        gx *= y
        return (gx,)

    return _emit("softmax", (a,), y, backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,):
        raise ShapeError(f"rms_norm weight shape {weight.shape} does not match last extent {d}")
    X, W = x.data, weight.data
    r = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    xhat = X * r
    out = xhat * W

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gh = g * W
            gx = r * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, gw

    return _emit("rms_norm", (x, weight), out, backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"token ids must be integers, got {ids.dtype}")
    V, d = table.shape
    bad = (ids < 0) | (ids >= V)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IndexError(f"token id {int(ids[pos])} at position {pos} outside [0, {V})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _emit("embedding", (table,), out, backward)


def _check_targets(logits_shape: tuple, targets: np.ndarray) -> None:
    if targets.shape != logits_shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits_shape}")
    V = logits_shape[-1]
    bad = (targets < 0) | (targets >= V)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IndexError(f"target {int(targets[pos])} at position {pos} outside [0, {V})")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))


def token_nll(logits: np.ndarray, targets) -> np.ndarray:
    """Per-position negative log-likelihood, no recording."""
    targets = np.asarray(targets)
    _check_targets(logits.shape, targets)
    logp = _log_softmax(logits)
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets)
    _check_targets(logits.shape, targets)
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    n = targets.size
    out = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        idx = targets[..., None]
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=-1) - 1, axis=-1)
        return (p * (g / n),)

    return _emit("cross_entropy", (logits,), out, backward)


def rope_apply(x: Tensor, positions, theta_base: float = 10000.0) -> Tensor:
    """Rotate consecutive (even, odd) pairs of the last axis by position-dependent angles.

    ``x`` is [B, T, H, d_head]; ``positions`` has length T.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ShapeError(f"rotary embedding needs an even head size, got {dh}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = theta_base ** (-np.arange(0, dh, 2, dtype=np.float64) / dh)
    ang = pos[:, None] * inv_freq[None, :]
    cos = np.cos(ang)[:, None, :].astype(x.dtype)
    sin = np.sin(ang)[:, None, :].astype(x.dtype)
    X = x.data
    xe, xo = X[..., 0::2], X[..., 1::2]
    out = np.empty_like(X)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _emit("rope", (x,), out, backward)
