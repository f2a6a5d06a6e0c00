"""TimeMachine-style hierarchical forecaster with test-time-training sequence blocks."""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    EmptyParameterError,
    InsufficientDataError,
    LoadError,
    ModeError,
    OptimizerError,
    RankError,
    TapeError,
    UnsupportedKernelError,
)
from .tensor import GradientMap, Tape, Tensor, backward, grad_check

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "EmptyParameterError",
    "GradientMap",
    "InsufficientDataError",
    "LoadError",
    "ModeError",
    "OptimizerError",
    "RankError",
    "Tape",
    "TapeError",
    "Tensor",
    "UnsupportedKernelError",
    "backward",
    "grad_check",
]

__version__ = "0.1.0"
