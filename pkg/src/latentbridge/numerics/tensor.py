"""Dense float tensors and the reverse-mode gradient tape.

Tensors are immutable values: the underlying buffer is row-major and
flagged read-only after construction. Every primitive op (see ops.py)
validates operand shapes, checks its output for NaN/Inf, and registers
a backward closure on the active tape so that `backward` can replay the
exact execution order in reverse.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "active_tape",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf (never a silent state)."""


class Tensor:
    """Immutable dense array of 32-bit floats.

    64-bit buffers are permitted only for the shadow evaluation mode used
    by grad_check; normal model code stays in float32 throughout.
    """

    __slots__ = ("data", "trainable")

    def __init__(self, data, trainable: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor literal contains NaN/Inf")
        arr.flags.writeable = False
        self.data = arr
        self.trainable = trainable

    @classmethod
    def _wrap(cls, arr: np.ndarray, trainable: bool = False) -> "Tensor":
        """Take ownership of a freshly computed array without copying."""
        t = object.__new__(cls)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.trainable = trainable
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self.data

    def __repr__(self) -> str:
        flags = ", trainable" if self.trainable else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flags})"


class _Node:
    __slots__ = ("op", "inputs", "output", "bwd")

    def __init__(self, op, inputs, output, bwd):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


_TAPE_STACK: list["GradTape"] = []


def active_tape():
    """The innermost open GradTape, or None outside any `with GradTape()`."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradTape:
    """Ordered record of executed primitive ops.

    Replaying the node list backward visits ops in exact reverse execution
    order; each node's bwd closure maps the output gradient to per-input
    gradients (None for non-differentiable inputs).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "GradTape exited out of order"
        return False

    def record(self, op: str, inputs: tuple, output: Tensor, bwd) -> None:
        self.nodes.append(_Node(op, inputs, output, bwd))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(tape: GradTape, loss: Tensor, params=None):
    """Accumulate dLoss/dLeaf for trainable leaves reached from `loss`.

    params may be a {name: Tensor} mapping (returns {name: grad}), a
    sequence of Tensors (returns a list of grads in the same order), or
    None (returns {Tensor: grad} for the trainable leaves the tape
    touched). Leaves in `params` never touched by the tape get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        dout = grads.pop(id(node.output), None)
        if dout is None:
            continue
        gins = node.bwd(dout)
        for t, g in zip(node.inputs, gins):
            if g is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    if params is None:
        touched: dict[Tensor, np.ndarray] = {}
        seen = set()
        for node in tape.nodes:
            for t in node.inputs:
                if t.trainable and id(t) not in seen and id(t) in grads:
                    seen.add(id(t))
                    touched[t] = grads[id(t)]
        return touched
    if isinstance(params, Mapping):
        return {
            name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
        }
    if isinstance(params, Sequence):
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]
    raise TypeError(f"params must be a mapping, sequence, or None, got {type(params)}")
