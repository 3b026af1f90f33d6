"""Tape-based reverse-mode autodiff values.

Storage is 32-bit float by default.  Inside reductions and matrix products the
ops accumulate in 64-bit and round back to the storage dtype.  The storage
dtype can be raised to 64-bit for a block of code with :func:`precision`,
which the finite-difference checker uses to get a clean numerical oracle.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from mmret.errors import ContractError

_local = threading.local()


def storage_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily change the storage dtype for nodes created on this thread."""
    prev = storage_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class TensorNode:
    """A dense tensor value, optionally recorded on a :class:`Tape`.

    ``data`` is a C-contiguous ndarray (the flat row-major payload reshaped to
    ``shape``).  ``grad`` is populated by :meth:`Tape.backward` for tracked
    nodes and stays ``None`` otherwise.
    """

    __slots__ = ("data", "grad", "tape", "parents", "backward_fn", "op", "_acc")

    def __init__(self, data, tape=None, parents=(), backward_fn=None, op="const"):
        self.data = data
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self._acc = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self):
        return self.tape is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"TensorNode(op={self.op}, shape={self.shape}, tracked={self.tracked})"


@dataclass
class Parameter:
    """Named model weight.  ``data`` is updated in place by the optimizer."""

    name: str
    data: np.ndarray
    trainable: bool = True

    @property
    def shape(self):
        return self.data.shape


def as_node(x) -> TensorNode:
    if isinstance(x, TensorNode):
        return x
    if isinstance(x, Parameter):
        x = x.data
    return TensorNode(np.asarray(x, order="C", dtype=storage_dtype()))


def constant(x) -> TensorNode:
    """Untracked node holding a copy of ``x`` in the storage dtype."""
    return TensorNode(np.array(x, dtype=storage_dtype()))


def make_node(data, parents: Sequence[TensorNode], backward_fn: Callable, op: str) -> TensorNode:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ContractError(f"{op}: operands are recorded on different tapes")
    if tape is None:
        return TensorNode(data, op=op)
    node = TensorNode(data, tape=tape, parents=tuple(parents), backward_fn=backward_fn, op=op)
    tape.nodes.append(node)
    return node


class Tape:
    """Records tracked nodes in creation (hence topological) order."""

    def __init__(self):
        self.nodes: list[TensorNode] = []
        self._watched: dict[int, tuple] = {}

    def watch(self, value, name: Optional[str] = None) -> TensorNode:
        """Return a tracked leaf for ``value``.

        Watching the same :class:`Parameter` twice returns the same leaf, so
        gradients from every use accumulate in one place.
        """
        # only Parameters are deduplicated; a plain array's id can be reused once it is freed
        is_param = isinstance(value, Parameter)
        if is_param and id(value) in self._watched:
            return self._watched[id(value)][1]
        raw = value.data if is_param else value
        arr = np.asarray(raw, order="C", dtype=storage_dtype())
        node = TensorNode(arr, tape=self, op="leaf")
        self.nodes.append(node)
        if is_param:
            self._watched[id(value)] = (value, node)  # holding the Parameter pins its id
        return node

    def watch_all(self, params: dict) -> dict:
        return {name: self.watch(p) for name, p in params.items()}

    def backward(self, loss: TensorNode) -> "Tape":
        if loss.tape is not self:
            raise ContractError("backward: loss is not recorded on this tape")
        if loss.size != 1:
            raise ContractError(f"backward: loss must be scalar-shaped, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
            node._acc = None
        loss._acc = np.ones(loss.shape, dtype=np.float64)
        for node in reversed(self.nodes):
            g = node._acc
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or parent.tape is None:
                    continue
                if parent._acc is None:
                    parent._acc = np.array(pg, dtype=np.float64)
                else:
                    parent._acc += pg
        for node in self.nodes:
            if node._acc is not None:
                node.grad = np.asarray(node._acc, order="C", dtype=node.data.dtype)
                node._acc = None
        return self

    def release(self):
        """Drop the recorded graph so its buffers can be freed immediately."""
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
            node.tape = None
        self.nodes = []
        self._watched = {}

    def grad(self, value) -> Optional[np.ndarray]:
        if isinstance(value, TensorNode):
            return value.grad
        entry = self._watched.get(id(value))
        return None if entry is None else entry[1].grad


def backward(loss: TensorNode) -> Tape:
    if loss.tape is None:
        raise ContractError("backward: loss is not tracked (tape tracking was not enabled)")
    return loss.tape.backward(loss)
