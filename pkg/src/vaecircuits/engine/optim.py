from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "OptimState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: OptimState, lr: float, names: Sequence[str] | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Weight decay is the classic L2 form: ``wd * p`` is added to the gradient
    before the moment updates. A missing gradient counts as zero.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        label = names[i] if names else f"param[{i}]"
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} does not match {label} {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for {label}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class Adam:
    """Adam over a list of leaf tensors; reads ``.grad`` and updates ``.data`` in place."""

    params: list[Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    names: list[str] | None = None
    state: OptimState = field(init=False)

    def __post_init__(self):
        self.state = OptimState.for_params(
            [p.data for p in self.params], lr=self.lr, beta1=self.betas[0],
            beta2=self.betas[1], eps=self.eps, weight_decay=self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.names)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step > total_steps:
        warnings.warn(f"cosine_lr: step {step} beyond total {total_steps}; clamping lr to 0",
                      stacklevel=2)
        return 0.0
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))
