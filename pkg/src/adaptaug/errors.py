"""Shared exception types."""


class ConfigurationError(ValueError):
    """Raised when a registry, experiment config, or checkpoint is invalid."""


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite during training."""
