"""Federated lesion-segmentation sandbox with noise-robust label correction."""

__version__ = "0.1.0"

from .errors import ConfigurationError, IngestionError, TrainingError

__all__ = ["ConfigurationError", "IngestionError", "TrainingError", "__version__"]
