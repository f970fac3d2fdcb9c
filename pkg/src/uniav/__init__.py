"""Unified audio-visual model: one network trained jointly for sound-source
localization, separation, and nearest-neighbor recognition, plus a synthetic
desk-scale benchmark and its metric suite."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    EvaluationTaskError,
    InputError,
    TrainingDivergenceError,
    UniavError,
)

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "EvaluationTaskError",
    "InputError",
    "TrainingDivergenceError",
    "UniavError",
    "__version__",
]
