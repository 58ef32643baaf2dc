"""
Non-private correlation similarities (Pearson and cosine).

Both are computed over co-rating users only, from a handful of dense
matrix products over the user x item rating and mask matrices. Predictions
reuse the neighborhood rule in ``core``; the neighbor cap lives in
``BaselineConfig``.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from .core import RatingDataset, SimilarityMatrix
from .errors import ConfigurationError, DatasetError


logger = logging.getLogger(__name__)

SimilarityKind = Literal["pearson", "cosine"]

_ZERO_VARIANCE = 1e-10


@dataclass
class CorrelationSimilarity:
    """Fixed correlation similarity of one kind."""

    kind: str
    values: SimilarityMatrix


def _dense(data: RatingDataset) -> Tuple[np.ndarray, np.ndarray]:
    ratings = np.zeros((data.n_users, data.n_items))
    mask = np.zeros((data.n_users, data.n_items))
    ratings[data.users, data.items] = data.values
    mask[data.users, data.items] = 1.0
    return ratings, mask


def compute_similarity(data: RatingDataset, kind: SimilarityKind) -> CorrelationSimilarity:
    """Pearson or cosine similarity between every item pair.

    Pearson centers each item on its mean over the pair's co-raters. Pairs
    with fewer than two co-raters, or with zero variance (zero norm for
    cosine) on the co-rated vectors, get similarity 0.
    """
    if kind not in ("pearson", "cosine"):
        raise ConfigurationError(f"unknown similarity kind '{kind}'")
    if data.n_ratings == 0:
        raise DatasetError("cannot compute similarities on an empty dataset")

    ratings, mask = _dense(data)
    co_raters = mask.T @ mask
    cross = ratings.T @ ratings
    # sums_i[i, j]: sum of item i's ratings over users who also rated j
    sums_i = ratings.T @ mask
    squares_i = (ratings * ratings).T @ mask
    sums_j = sums_i.T
    squares_j = squares_i.T

    with np.errstate(invalid="ignore", divide="ignore"):
        if kind == "pearson":
            numerator = cross - sums_i * sums_j / co_raters
            var_i = squares_i - sums_i * sums_i / co_raters
            var_j = squares_j - sums_j * sums_j / co_raters
            flat = (var_i <= _ZERO_VARIANCE * np.maximum(squares_i, 1.0)) | (
                var_j <= _ZERO_VARIANCE * np.maximum(squares_j, 1.0)
            )
        else:
            numerator = cross
            var_i = squares_i
            var_j = squares_j
            flat = (var_i <= 0) | (var_j <= 0)
        values = numerator / np.sqrt(var_i * var_j)

    values = np.where((co_raters >= 2) & ~flat, values, 0.0)
    values = np.clip(values, -1.0, 1.0)
    np.fill_diagonal(values, 0.0)
    logger.info(
        f"Computed {kind} similarity for {data.n_items} items "
        f"({int(np.count_nonzero(values))} non-zero entries)"
    )
    return CorrelationSimilarity(kind=kind, values=SimilarityMatrix(values))


def similarity_kind(model_name: str) -> SimilarityKind:
    """Map a baseline model name (``pcc``/``cos``) to its similarity kind."""
    kinds = {"pcc": "pearson", "cos": "cosine"}
    if model_name not in kinds:
        raise ConfigurationError(f"'{model_name}' is not a correlation baseline")
    return kinds[model_name]  # type: ignore[return-value]
