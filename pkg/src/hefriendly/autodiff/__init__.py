"""Minimal float64 tensor engine with reverse-mode differentiation."""

from .tensor import Tape, TapeNode, Tensor, backward, current_tape, no_grad, using_tape
from .optim import Adam
from . import ops

__all__ = [
    "Adam",
    "Tape",
    "TapeNode",
    "Tensor",
    "backward",
    "current_tape",
    "no_grad",
    "ops",
    "using_tape",
]
