"""Service modules for dpnb."""

from .core import RatingDataset, SimilarityMatrix
from .errors import ConfigurationError, DatasetError, DpnbError, EvaluationError, TrainingError
from .storage import StorageService

__all__ = [
    "RatingDataset",
    "SimilarityMatrix",
    "StorageService",
    "DpnbError",
    "DatasetError",
    "ConfigurationError",
    "TrainingError",
    "EvaluationError",
]
