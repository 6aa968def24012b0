"""Tensor type, recorded op nodes and reverse-mode backward pass."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs and a closure mapping dL/dout to dL/dinputs."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{op}: produced {bad} non-finite value(s) in output of shape "
                             f"{arr.shape}")


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable node recording; ops still run and still check finiteness."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; attach a tape node when any input participates in autodiff."""
    check_finite(op, data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


class Tape:
    """Topologically ordered op nodes reachable from an output tensor."""

    def __init__(self, order: list[Tensor]):
        self.order = order

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        if out._node is None:
            raise TapeError(
                f"tensor of shape {out.shape} was not produced by a recorded op "
                "(no input required grad)"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion would overflow on long graphs
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._node.inputs:
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.order]

    def __len__(self) -> int:
        return len(self.order)

    def __contains__(self, t: Tensor) -> bool:
        return any(o is t for o in self.order)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_output(loss)
    elif loss not in tape:
        raise TapeError("loss tensor is not part of the supplied tape")
    if not tape.order or tape.order[-1] is not loss:
        raise TapeError("loss must be the final node of the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(
                    f"{node.op}: backward produced grad {ig.shape} for input {inp.shape}"
                )
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
