"""Tensor values and the reverse-mode differentiation tape."""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

LOGGER = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "condl_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operator inputs have incompatible shapes."""


class Tensor:
    """An n-dimensional float array with an optional accumulated gradient.

    Data is stored as a numpy array. Float32 is the default; float64 input is
    kept as float64 so that finite-difference checks can run at full precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(
        self,
        data: np.ndarray | Sequence[float] | float,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: np.dtype | type | None = None,
    ) -> None:
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype != np.float64:
            array = array.astype(DEFAULT_DTYPE, copy=False)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @classmethod
    def zeros(cls, shape: Iterable[int], *, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=DEFAULT_DTYPE), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    inputs: Tuple[int, ...]
    output: int
    backward: BackwardRule
    op: str


@dataclass
class Tape:
    """Ordered record of operations built by one thread.

    Use as a context manager: operators executed inside ``with Tape() as tape``
    are recorded when any of their inputs requires a gradient.
    """

    nodes: List[TapeNode] = field(default_factory=list)
    next_id: int = 0
    _tensors: Dict[int, Tensor] = field(default_factory=dict)
    _ids: Dict[int, int] = field(default_factory=dict)
    _token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def register(self, tensor: Tensor) -> int:
        key = id(tensor)
        node_id = self._ids.get(key)
        if node_id is None:
            node_id = self.next_id
            self.next_id += 1
            self._ids[key] = node_id
            self._tensors[node_id] = tensor
            tensor.tape_id = node_id
        return node_id

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: BackwardRule,
    ) -> None:
        input_ids = tuple(self.register(tensor) for tensor in inputs)
        output_id = self.register(output)
        self.nodes.append(TapeNode(inputs=input_ids, output=output_id, backward=backward, op=op))

    def contains(self, tensor: Tensor) -> bool:
        return id(tensor) in self._ids

    def reset(self) -> None:
        for tensor in self._tensors.values():
            tensor.tape_id = None
        self.nodes.clear()
        self._tensors.clear()
        self._ids.clear()
        self.next_id = 0


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    output: Tensor,
    backward: BackwardRule,
) -> Tensor:
    """Attach ``output`` to the active tape when any input needs a gradient."""

    tape = active_tape()
    if tape is None or not any(tensor.requires_grad for tensor in inputs):
        return output
    output.requires_grad = True
    tape.record(op, inputs, output, backward)
    return output


def backward(loss: Tensor, tape: Tape) -> None:
    """Differentiate ``loss`` with respect to every leaf tensor on ``tape``.

    Gradients are added into ``Tensor.grad`` of leaves that require them, so
    repeated calls accumulate. The tape is reset afterwards.
    """

    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not tape.contains(loss):
        raise ValueError("loss was not produced on this tape")

    produced = {node.output for node in tape.nodes}
    grads: Dict[int, np.ndarray] = {
        tape.register(loss): np.ones_like(loss.data)
    }

    for node in reversed(tape.nodes):
        upstream = grads.pop(node.output, None)
        if upstream is None:
            continue
        input_grads = node.backward(upstream)
        for input_id, grad in zip(node.inputs, input_grads):
            if grad is None:
                continue
            tensor = tape._tensors[input_id]
            if not tensor.requires_grad:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + grad
            else:
                grads[input_id] = grad

    for node_id, grad in grads.items():
        if node_id in produced:
            continue
        tensor = tape._tensors[node_id]
        if not tensor.requires_grad:
            continue
        grad = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad

    LOGGER.debug("tape_backward", extra={"nodes": len(tape.nodes)})
    tape.reset()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


def ensure_tensor(value: Tensor | np.ndarray | Sequence[float] | float) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)
