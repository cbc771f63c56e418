"""Pulse-from-video modeling with butterfly fold exchange and a taped autodiff core."""

from .errors import (
    ConfigError,
    NumericalError,
    OutOfRangePairing,
    PulseshiftError,
    ShapeError,
    ValidationError,
)
from .tensor import Tape, Tensor, grad_check

__all__ = [
    "ConfigError",
    "NumericalError",
    "OutOfRangePairing",
    "PulseshiftError",
    "ShapeError",
    "Tape",
    "Tensor",
    "ValidationError",
    "grad_check",
]

__version__ = "0.1.0"
