"""Dense float64 tensors and the reverse-mode tape that differentiates them."""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_ids = itertools.count()


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot.

    ``data`` is kept as a numpy array in C (row-major) order, so the flat view
    ``data.ravel()`` is the canonical element order used by checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.name = name

    @classmethod
    def from_flat(cls, shape: Sequence[int], flat, **kwargs) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"dimensions must be positive, got {shape}")
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise DimensionError(
                f"product of shape {shape} != number of values {flat.size}"
            )
        return cls(flat.reshape(shape), **kwargs)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def flat(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"tensor of shape {self.shape} is not a scalar")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> None:
        if not np.isfinite(self.data).all():
            raise NumericError(f"tensor {self.name or self.id} holds non-finite values")
        if self.grad is not None and not np.isfinite(self.grad).all():
            raise NumericError(f"gradient of tensor {self.name or self.id} is non-finite")

    def __deepcopy__(self, memo):
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        if self.grad is not None:
            out.grad = self.grad.copy()
        memo[id(self)] = out
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]
    saved: dict = field(default_factory=dict)

    @property
    def input_ids(self) -> tuple:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, op, inputs, output, backward, saved=None) -> TapeNode:
        node = TapeNode(op, tuple(inputs), output, backward, saved or {})
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        self.nodes.clear()

    def validate(self) -> None:
        """Check that every input was created before the node's output."""
        for node in self.nodes:
            for i in node.input_ids:
                if i >= node.output_id:
                    raise ContractError(
                        f"tape node {node.op} consumes tensor {i} created after its "
                        f"output {node.output_id}"
                    )

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape: Tape = Tape()
        self.enabled: bool = True


_state = _State()


def current_tape() -> Optional[Tape]:
    return _state.tape if _state.enabled else None


def grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def using_tape(tape: Tape):
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every leaf tensor that requires it.

    Gradients are accumulated into existing ``.grad`` arrays, so callers zero
    them between steps. The tape is cleared afterwards, even on error.
    """
    tape = _state.tape if tape is None else tape
    if loss.size != 1:
        tape.clear()
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {node.output_id for node in tape.nodes}
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    try:
        for index in range(len(tape.nodes) - 1, -1, -1):
            node = tape.nodes[index]
            g_out = grads.pop(node.output_id, None)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if not np.isfinite(g).all():
                    raise NumericError(
                        f"non-finite gradient flowing out of tape node {index} ({node.op})",
                        node_id=index,
                    )
                grads[t.id] = grads[t.id] + g if t.id in grads else g
                if t.id not in produced:
                    leaves[t.id] = t
        if loss.id not in produced and loss.requires_grad:
            leaves[loss.id] = loss
        for tid, t in leaves.items():
            g = grads[tid]
            t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g
    finally:
        tape.clear()
