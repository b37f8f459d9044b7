"""Exception types shared across the package."""


class LanitError(Exception):
    """Base class for all errors raised by lanit."""


class ConfigError(LanitError, ValueError):
    pass


class InputError(LanitError, ValueError):
    pass


class ShapeError(InputError):
    pass


class NormalizationError(InputError):
    """Raised when a zero vector would have to be normalized."""


class CheckpointError(LanitError):
    pass


class TrainingError(LanitError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
