"""Minimal float64 reverse-mode autodiff engine."""
from . import functional
from .optim import Adam, OptimState, adam_step, cosine_lr
from .rng import SeededRNG
from .tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor, backward, no_grad

__all__ = [
    "Adam", "NonFiniteError", "OptimState", "SeededRNG", "ShapeError", "Tape", "TapeError",
    "Tensor", "adam_step", "backward", "cosine_lr", "functional", "no_grad",
]
