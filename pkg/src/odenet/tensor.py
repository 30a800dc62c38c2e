"""Reverse-mode autodiff core.

A Tensor wraps a numpy array and an optional gradient buffer. Operations
in :mod:`odenet.ops` push (output, backward_fn) records onto the active
Tape; ``Tape.backward`` replays the records once, in reverse execution
order, accumulating gradients additively into every input that
contributed. One tape per training step; nothing here is retained
across steps.

The active-tape stack is thread local, so an evaluation forward pass on
a worker thread never records onto a tape owned by the training thread.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = ["Tensor", "Parameter", "Tape", "active_tape", "record", "accumulate"]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            # integer / bool inputs are convenience casts, not a dtype choice
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Copy of the value with no gradient buffer."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter:
    """Named model state: a value tensor plus its optimizer momentum buffer.

    ``trainable=False`` marks state that the forward pass maintains itself
    (batchnorm running statistics); the optimizer never touches it.
    """

    __slots__ = ("name", "value", "momentum_buffer", "trainable")

    def __init__(self, name: str, value, trainable: bool = True, dtype=None):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.momentum_buffer = Tensor(np.zeros_like(self.value.data))
        self.trainable = trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def clone(self, name: str | None = None, copy_momentum: bool = False) -> "Parameter":
        """Independent deep copy, optionally carrying the momentum buffer."""
        p = Parameter(self.name if name is None else name,
                      Tensor(self.value.data.copy()), trainable=self.trainable)
        if copy_momentum:
            p.momentum_buffer = Tensor(self.momentum_buffer.data.copy())
        return p

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


_tls = threading.local()


def _stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


class Tape:
    """Linear record of executed ops, replayed once in reverse by backward().

    Usage::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate through the records in reverse.

        Each record runs exactly once. Outputs that never received a
        gradient (dead branches) are skipped.
        """
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is None:
                continue
            fn(out.grad)


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
    """Push a backward closure onto the active tape, if any."""
    tape = active_tape()
    if tape is not None:
        tape.record(out, backward)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating the buffer on first touch.

    Additive accumulation is what makes fan-out correct: a tensor feeding
    two consumers receives the sum of both contributions.
    """
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.value.grad = None
