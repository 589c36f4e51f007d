"""Exception types shared across modules."""

from .numerics import DimensionError, NumericalError, UsageError
from .data import IngestionError


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class CapacityError(ValueError):
    """Not enough data to satisfy a request (e.g. fewer patches than V)."""


class ConfigMismatchError(ConfigError):
    """A checkpoint was produced by a different model configuration."""


__all__ = [
    "ConfigError",
    "CapacityError",
    "ConfigMismatchError",
    "DimensionError",
    "NumericalError",
    "UsageError",
    "IngestionError",
]
