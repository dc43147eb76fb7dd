"""Minimal reverse-mode differentiable computation substrate."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    DiffArray,
    Parameter,
    Tape,
    backward,
    check_finite_enabled,
    set_check_finite,
    uniform_fan_in,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "DiffArray",
    "Parameter",
    "Tape",
    "adam_step",
    "backward",
    "check_finite_enabled",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
    "set_check_finite",
    "uniform_fan_in",
]
