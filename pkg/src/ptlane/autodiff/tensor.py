"""Tensors and the recording tape for reverse-mode differentiation."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeMismatch


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside record themselves when at
    least one input requires a gradient.  Tapes are per thread.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.records.append(Record(op, tuple(inputs), output, backward))

    def count(self, op: str) -> int:
        return sum(1 for r in self.records if r.op == op)

    def backward(self, loss: Tensor, grad=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if loss.data.size != 1:
                raise ShapeMismatch("backward without an explicit gradient needs a scalar")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=np.float64)}
        produced = {id(r.output) for r in self.records}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeMismatch(f"{rec.op}: gradient shape {gi.shape} != {t.shape}")
                key = id(t)
                if key in produced:
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def record(op: str, inputs, output: Tensor, backward) -> Tensor:
    """Register ``output`` on the active tape if any input needs a gradient."""
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        output.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(op, inputs, output, backward)
    return output
