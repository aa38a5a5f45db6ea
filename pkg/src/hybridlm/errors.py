"""Exception types shared across the package."""

from .tape import ShapeError

__all__ = [
    "ConfigError",
    "ShapeError",
    "ArchitectureError",
    "CheckpointError",
    "NumericalError",
]


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class ArchitectureError(ValueError):
    """An architecture string does not parse."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class CheckpointError(IOError):
    """A checkpoint file is missing, truncated, or corrupt."""


class NumericalError(ArithmeticError):
    """Training produced non-finite values that cannot be skipped past."""
