"""Numeric substrate: tensors, reverse-mode autodiff, Adam, checkpoints."""

from . import ops
from .checkpoint import MAGIC, load_checkpoint, save_checkpoint, sha256_file
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamState, adam_step
from .tensor import (
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    active_tape,
    backward,
)

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "active_tape",
    "backward",
    "ops",
    "AdamState",
    "adam_step",
    "GradCheckReport",
    "grad_check",
    "MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "sha256_file",
]
