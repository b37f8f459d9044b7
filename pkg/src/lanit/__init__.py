"""Multi-hot, text-defined domain labels for unsupervised image-to-image translation."""

from lanit.errors import (
    CheckpointError,
    ConfigError,
    InputError,
    LanitError,
    NormalizationError,
    ShapeError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "InputError",
    "LanitError",
    "NormalizationError",
    "ShapeError",
    "TrainingError",
    "__version__",
]
