"""Dense tensors, the computation tape, and the reverse sweep.

A :class:`Tensor` wraps a numpy array. Operations performed while a
:class:`Tape` is active append one :class:`Node` each to that tape; the
reverse sweep walks the tape backwards exactly once. Outside any tape,
operations are plain numpy evaluations (used for acting and evaluation).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

PRECISIONS = {"fast": np.float32, "high": np.float64}
_dtype = np.float32
_tapes: list["Tape"] = []


def set_precision(mode: str) -> None:
    global _dtype
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    _dtype = PRECISIONS[mode]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch between float32 ("fast") and float64 ("high")."""
    global _dtype
    prev = _dtype
    set_precision(mode)
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from any tape; never receives gradient."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.node = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op: str, out: Tensor, parents: Sequence, backward: Callable):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the recording order is a
    topological order of the graph by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> list[str]:
        """Reverse sweep from ``loss``. Returns the op names in visit order."""
        if seed is None:
            if loss.size != 1:
                raise ValueError(f"reverse sweep needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        loss.grad = np.asarray(seed, dtype=loss.data.dtype).reshape(loss.shape)
        visited = []
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            visited.append(node.op)
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True).reshape(parent.shape)
                else:
                    parent.grad += pg
        return visited

    def release(self) -> None:
        """Drop recorded nodes so activations can be garbage collected."""
        for node in self.nodes:
            node.out.node = None
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (e.g. for bootstrap values treated as constants)."""
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


def record(op: str, out_data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    """Wrap an op result, recording a node if any parent needs gradient."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.node = None
    tape = active_tape()
    needs = tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        node = Node(op, out, parents, backward)
        out.node = node
        tape.nodes.append(node)
    return out


def reverse_sweep(loss: Tensor, tape: Tape | None = None) -> list[str]:
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape recorded the loss; run the forward pass inside `with Tape():`")
    return tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
