"""Tensors, trainable parameters and the recording tape.

Reverse mode works at the level of whole operations: every differentiable op
appends one entry ``(inputs, outputs, backward_fn)`` to the active tape, and
:func:`backward` replays the entries in reverse. Because an entry is visited
only after every later consumer of its outputs, multi-output ops (the LSTM
cell) need no special handling.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeMismatch, TapeReuse

_param_ids = itertools.count()
_active_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Param(Tensor):
    """A named, optionally trainable tensor whose grad is always allocated."""

    __slots__ = ("id", "name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.id = next(_param_ids)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded.
    A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.entries: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.entries)


def recording() -> bool:
    return bool(_active_tapes)


def record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn: Callable) -> None:
    """Register an op on the active tape when any input needs a gradient."""
    if not _active_tapes:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    _active_tapes[-1].entries.append((tuple(inputs), tuple(outputs), backward_fn))


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable Param reachable from ``loss``."""
    if tape.consumed:
        raise TapeReuse("tape has already been consumed by a backward pass")
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for inputs, outputs, fn in reversed(tape.entries):
        out_grads = [o.grad for o in outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [np.zeros_like(o.data) if g is None else g
                     for o, g in zip(outputs, out_grads)]
        in_grads = fn(*out_grads)
        for t, g in zip(inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if isinstance(t, Param):
                t.grad += g
            elif t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g
    tape.entries.clear()
