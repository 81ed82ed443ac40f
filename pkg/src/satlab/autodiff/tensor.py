"""Dense tensors and the recording trace used for reverse-mode differentiation."""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count(1)
_active: contextvars.ContextVar[Optional["Trace"]] = contextvars.ContextVar(
    "satlab_active_trace", default=None
)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """An op was given values outside its mathematical domain."""


class Tensor:
    """A float32/float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves (parameters) whose gradient should be
    populated by :meth:`Trace.backward`. Op outputs inherit it from their
    inputs while a trace is recording.
    """

    __slots__ = ("data", "grad", "requires_grad", "tid", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tid = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar; ops is imported lazily to avoid a circular import
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().ew_unary("neg", self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes)

    def __getitem__(self, key):
        return _ops().index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)


def _ops():
    from satlab.autodiff import ops

    return ops


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


@dataclass
class Trace:
    """An ordered tape of op records.

    Use as a context manager; ops executed inside the block are recorded
    when at least one input requires a gradient. Ops executed with no active
    trace are plain forward computations.
    """

    records: list = field(default_factory=list)
    _produced: dict = field(default_factory=dict)
    _done: bool = False
    _token: object = None

    def __enter__(self) -> "Trace":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def record(self, kind: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> None:
        if self._done:
            raise RuntimeError("trace has already been backpropagated; call reset() first")
        self.records.append(OpRecord(kind, inputs, output, backward))
        self._produced[output.tid] = len(self.records) - 1

    def reset(self) -> None:
        self.records.clear()
        self._produced.clear()
        self._done = False

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every gradient-requiring tensor upstream of ``loss``.

        Leaf gradients accumulate into an existing ``.grad``; intermediate
        gradients are overwritten. Records are visited once, newest first.
        """
        if self._done:
            raise RuntimeError("backward already ran on this trace; call reset() first")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tid not in self._produced:
            raise ValueError("loss was not produced by this trace")
        self._done = True

        grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.tid, None)
            if g is None:
                continue
            rec.output.grad = g
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t.tid not in self._produced:
                    leaves[t.tid] = t
                prev = grads.get(t.tid)
                grads[t.tid] = gi if prev is None else prev + gi
        for tid, leaf in leaves.items():
            g = grads[tid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor, trace: Trace) -> None:
    trace.backward(loss)


def active_trace() -> Optional[Trace]:
    return _active.get()


def no_trace():
    """Context manager that suspends recording (evaluation mode)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._token = _active.set(None)
        return self

    def __exit__(self, *exc):
        _active.reset(self._token)
