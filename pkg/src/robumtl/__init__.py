"""Routed low-rank experts for robust multi-task vision on a numpy tensor engine."""

from .errors import DimensionError, FormatError, ModeError, RobuMTLError, TrainingError, ValidationError
from .perturb import PerturbationKind

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "FormatError",
    "ModeError",
    "PerturbationKind",
    "RobuMTLError",
    "TrainingError",
    "ValidationError",
]
