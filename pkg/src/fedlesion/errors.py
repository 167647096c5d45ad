"""Shared exception types."""


class ConfigurationError(ValueError):
    """A config, spec, or argument fails validation before any work starts."""


class IngestionError(RuntimeError):
    """A volume on disk cannot be loaded into a usable Volume."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss or otherwise cannot continue."""
