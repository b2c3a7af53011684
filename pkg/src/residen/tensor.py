"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major numpy array (float32 or
float64) plus an optional gradient buffer of the same shape. Operations in
:mod:`residen.ops` record a backward rule onto the innermost active
:class:`Tape`; :func:`backward` replays the tape in reverse and accumulates
gradients into every ``requires_grad`` tensor reachable from the loss.

Tensors are immutable once produced by an op, except for gradient
accumulation during backward. A tape and the tensors recorded on it belong
to one worker at a time; separate model replicas on separate workers need
no locking.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import UsageError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional numeric array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same data, no gradient tracking."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise UsageError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops, replayed in reverse by backward().

    Ops append themselves in execution order, so the list is topologically
    sorted by construction: every entry appears after the entries that
    produced its inputs.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._used = False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._entries.append((output, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def tape_for(*tensors: Tensor) -> Optional[Tape]:
    """The active tape if any input wants gradients, else None."""
    tape = active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in tensors):
        return tape
    return None


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    Visits each recorded op exactly once, in reverse execution order.
    Tensors not on a path to the loss keep ``grad is None``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise UsageError("tape already consumed by a previous backward pass")
    tape._used = True
    loss.grad = np.ones_like(loss.data)
    for output, backward_fn in reversed(tape._entries):
        if output.grad is None:
            continue
        backward_fn(output.grad)


class ParamSet:
    """Ordered map from unique names to tensors, with a trainable flag each."""

    def __init__(self):
        self._items: "OrderedDict[str, tuple[Tensor, bool]]" = OrderedDict()

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> None:
        if name in self._items:
            raise UsageError(f"duplicate parameter name {name!r}")
        self._items[name] = (tensor, trainable)

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name][0]

    def __iter__(self) -> Iterator[tuple[str, Tensor, bool]]:
        for name, (tensor, trainable) in self._items.items():
            yield name, tensor, trainable

    def names(self) -> list[str]:
        return list(self._items.keys())

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, (tensor, flag) in self._items.items():
            if flag:
                yield name, tensor

    def subset(self, names) -> "ParamSet":
        out = ParamSet()
        for name in names:
            tensor, flag = self._items[name]
            out.add(name, tensor, flag)
        return out

    def zero_grads(self) -> None:
        for tensor, _ in self._items.values():
            tensor.zero_grad()
