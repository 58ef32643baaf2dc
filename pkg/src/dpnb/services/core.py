"""
Rating data model and the probabilistic neighborhood model.

This module holds the sparse rating store, the item-item similarity matrix,
and the prediction, loss and gradient functions shared by every trainer.
Predictions are computed user by user: all targets of one user share the
same rating history, so one dense slice of the similarity matrix serves them
all.
"""

import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DatasetError


logger = logging.getLogger(__name__)

BINARY_MAGIC = b"DPNB"

PairBatch = Union[np.ndarray, Sequence[Tuple[int, int]]]


class RatingDataset:
    """Observed ratings with per-user and per-item indices.

    The flat arrays keep the order the ratings were given in; the per-user and
    per-item views are index permutations into them, sorted by item (resp.
    user) inside each group.
    """

    def __init__(
        self,
        users: Iterable[int],
        items: Iterable[int],
        values: Iterable[float],
        n_users: int,
        n_items: int,
        rating_scale: Tuple[float, float] = (1.0, 5.0),
        max_ratings_per_user: Optional[int] = None,
        user_ids: Optional[Iterable[int]] = None,
        item_ids: Optional[Iterable[int]] = None,
    ):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.rating_scale = (float(rating_scale[0]), float(rating_scale[1]))
        self.max_ratings_per_user = max_ratings_per_user
        self.user_ids = None if user_ids is None else np.asarray(user_ids, dtype=np.int64)
        self.item_ids = None if item_ids is None else np.asarray(item_ids, dtype=np.int64)

        self._validate()

        # sorted pair keys give O(log n) membership lookups
        keys = self.users * self.n_items + self.items
        self._key_order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._key_order]
        if len(keys) > 1 and np.any(np.diff(self._sorted_keys) == 0):
            dup = int(self._sorted_keys[np.flatnonzero(np.diff(self._sorted_keys) == 0)[0]])
            raise DatasetError(
                f"duplicate rating for user {dup // self.n_items}, item {dup % self.n_items}"
            )

        # by-user view is exactly the key order (user major, item minor)
        self.user_order = self._key_order
        self.user_indptr = _indptr(self.users, self.n_users)
        item_keys = self.items * self.n_users + self.users
        self.item_order = np.argsort(item_keys, kind="stable")
        self.item_indptr = _indptr(self.items, self.n_items)

        self.item_counts = np.bincount(self.items, minlength=self.n_items).astype(np.int64)
        self.user_counts = np.bincount(self.users, minlength=self.n_users).astype(np.int64)
        sums = np.bincount(self.items, weights=self.values, minlength=self.n_items)
        midpoint = (self.rating_scale[0] + self.rating_scale[1]) / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            means = sums / self.item_counts
        self.item_means = np.where(self.item_counts > 0, means, midpoint)
        self.deviations = self.values - self.item_means[self.items]

    def _validate(self) -> None:
        if not (len(self.users) == len(self.items) == len(self.values)):
            raise DatasetError("users, items and values must have the same length")
        if self.n_users < 0 or self.n_items < 0:
            raise DatasetError("dataset dimensions must be non-negative")
        r_min, r_max = self.rating_scale
        if r_min >= r_max:
            raise DatasetError(f"invalid rating scale [{r_min}, {r_max}]")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DatasetError(f"user index out of range [0, {self.n_users})")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DatasetError(f"item index out of range [0, {self.n_items})")
            if not np.all(np.isfinite(self.values)):
                raise DatasetError("ratings must be finite")
            if self.values.min() < r_min or self.values.max() > r_max:
                raise DatasetError(f"rating outside scale [{r_min}, {r_max}]")

    @property
    def n_ratings(self) -> int:
        """Total number of observed ratings."""
        return int(len(self.values))

    @property
    def phi(self) -> float:
        """Width of the rating scale, r_max - r_min."""
        return self.rating_scale[1] - self.rating_scale[0]

    def user_history(self, u: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Items, values and mean-centered deviations of user ``u``, ordered by item."""
        self.check_user(u)
        idx = self.user_order[self.user_indptr[u] : self.user_indptr[u + 1]]
        return self.items[idx], self.values[idx], self.deviations[idx]

    def item_raters(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """Users and values of the ratings of item ``i``, ordered by user."""
        self.check_item(i)
        idx = self.item_order[self.item_indptr[i] : self.item_indptr[i + 1]]
        return self.users[idx], self.values[idx]

    def check_user(self, u: int) -> None:
        if not 0 <= u < self.n_users:
            raise DatasetError(f"user index {u} out of range [0, {self.n_users})")

    def check_item(self, i: int) -> None:
        if not 0 <= i < self.n_items:
            raise DatasetError(f"item index {i} out of range [0, {self.n_items})")

    def positions(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Positions in the flat arrays of the given (user, item) pairs.

        Raises ``DatasetError`` for pairs that are not observed ratings.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        keys = users * self.n_items + items
        if not len(self._sorted_keys):
            if len(keys):
                raise DatasetError("dataset has no observed ratings")
            return np.zeros(0, dtype=np.int64)
        where = np.searchsorted(self._sorted_keys, keys)
        where = np.minimum(where, len(self._sorted_keys) - 1)
        found = self._sorted_keys[where] == keys
        if not np.all(found):
            bad = int(np.flatnonzero(~found)[0])
            raise DatasetError(
                f"pair (user {int(users[bad])}, item {int(items[bad])}) is not an observed rating"
            )
        return self._key_order[where]

    def subset(self, positions: np.ndarray) -> "RatingDataset":
        """Dataset made of the ratings at ``positions``; dimensions are kept."""
        positions = np.asarray(positions, dtype=np.int64)
        return RatingDataset(
            self.users[positions],
            self.items[positions],
            self.values[positions],
            n_users=self.n_users,
            n_items=self.n_items,
            rating_scale=self.rating_scale,
            max_ratings_per_user=self.max_ratings_per_user,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"user": self.users, "item": self.items, "rating": self.values})

    def fingerprint(self) -> str:
        """Content hash of the ratings, dimensions and scale."""
        digest = hashlib.sha256()
        digest.update(struct.pack("<qqdd", self.n_users, self.n_items, *self.rating_scale))
        for array in (self.users, self.items, self.values):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def summary(self) -> Dict[str, Any]:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_ratings": self.n_ratings,
            "r_min": self.rating_scale[0],
            "r_max": self.rating_scale[1],
            "phi": self.phi,
            "max_ratings_per_user": self.max_ratings_per_user,
        }

    def __len__(self) -> int:
        return self.n_ratings

    def __repr__(self) -> str:
        return (
            f"RatingDataset(N={self.n_users}, M={self.n_items}, "
            f"ratings={self.n_ratings}, scale={self.rating_scale})"
        )


def _indptr(keys: np.ndarray, size: int) -> np.ndarray:
    counts = np.bincount(keys, minlength=size) if len(keys) else np.zeros(size, dtype=np.int64)
    indptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr


class SimilarityMatrix:
    """Dense item-item similarity parameters.

    Row ``i`` holds the neighborhood weights of item ``i``. The matrix is not
    kept symmetric. The diagonal is never read by the prediction rule.
    """

    diagonal_excluded = True

    def __init__(self, values: np.ndarray, beta: float = 1.0):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise DatasetError(f"similarity matrix must be square, got shape {values.shape}")
        if beta <= 0:
            raise DatasetError(f"similarity scale must be positive, got {beta}")
        self.values = values
        self.beta = float(beta)

    @classmethod
    def initialize(
        cls,
        n_items: int,
        rng: np.random.Generator,
        low: float = 0.5,
        high: float = 1.0,
    ) -> "SimilarityMatrix":
        """Uniform(low, high) off-diagonal entries, zero diagonal."""
        values = rng.uniform(low, high, size=(n_items, n_items))
        np.fill_diagonal(values, 0.0)
        return cls(values)

    @classmethod
    def zeros(cls, n_items: int) -> "SimilarityMatrix":
        return cls(np.zeros((n_items, n_items)))

    @property
    def n_items(self) -> int:
        return int(self.values.shape[0])

    def copy(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.values.copy(), beta=self.beta)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def check_bound(self, data: RatingDataset) -> None:
        if self.n_items != data.n_items:
            raise DatasetError(
                f"similarity matrix has {self.n_items} items, dataset has {data.n_items}"
            )

    def top_n_mask(self, top_n: int) -> np.ndarray:
        """Boolean mask of the ``top_n`` largest-|s_ij| entries of every row.

        The diagonal is never kept; ties go to the smaller item index.
        """
        magnitude = np.abs(self.values)
        np.fill_diagonal(magnitude, -1.0)
        order = np.argsort(-magnitude, axis=1, kind="stable")
        keep = np.zeros(self.values.shape, dtype=bool)
        n = min(max(int(top_n), 0), max(self.n_items - 1, 0))
        rows = np.arange(self.n_items)[:, None]
        keep[rows, order[:, :n]] = True
        np.fill_diagonal(keep, False)
        return keep

    def truncated(self, top_n: int) -> "SimilarityMatrix":
        """Copy with everything outside each row's top-N set to zero."""
        return SimilarityMatrix(np.where(self.top_n_mask(top_n), self.values, 0.0), beta=self.beta)

    def symmetrized(self) -> "SimilarityMatrix":
        return SimilarityMatrix((self.values + self.values.T) / 2.0, beta=self.beta)

    def to_triples(self, top_n: Optional[int] = None) -> pd.DataFrame:
        """``item_i, item_j, value`` rows for the surviving off-diagonal entries."""
        if top_n is None:
            keep = np.ones(self.values.shape, dtype=bool)
            np.fill_diagonal(keep, False)
        else:
            keep = self.top_n_mask(top_n)
        rows, cols = np.nonzero(keep)
        return pd.DataFrame({"item_i": rows, "item_j": cols, "value": self.values[rows, cols]})

    @classmethod
    def from_triples(cls, frame: pd.DataFrame, n_items: int) -> "SimilarityMatrix":
        values = np.zeros((n_items, n_items))
        values[frame["item_i"].to_numpy(), frame["item_j"].to_numpy()] = frame["value"].to_numpy()
        return cls(values)

    def to_bytes(self) -> bytes:
        """``DPNB`` + u32 M + row-major little-endian float64 values."""
        buffer = io.BytesIO()
        buffer.write(BINARY_MAGIC)
        buffer.write(struct.pack("<I", self.n_items))
        buffer.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return buffer.getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "SimilarityMatrix":
        if payload[:4] != BINARY_MAGIC:
            raise DatasetError("not a dpnb similarity file (bad magic)")
        (m,) = struct.unpack("<I", payload[4:8])
        expected = 8 + 8 * m * m
        if len(payload) != expected:
            raise DatasetError(f"similarity file has {len(payload)} bytes, expected {expected}")
        values = np.frombuffer(payload[8:], dtype="<f8").reshape(m, m).astype(np.float64)
        return cls(values)

    def __repr__(self) -> str:
        return f"SimilarityMatrix(M={self.n_items}, beta={self.beta})"


@dataclass
class PredictionContext:
    """Who is being predicted and under which neighborhood restriction."""

    user: int
    item: int
    neighbor_limit: Optional[int] = None

    @property
    def excluded_item(self) -> int:
        return self.item


@dataclass
class UserNeighborhood:
    """Dense neighborhood block for several targets of one user."""

    targets: np.ndarray
    history: np.ndarray
    deviations: np.ndarray
    weights: np.ndarray
    active: np.ndarray
    denominators: np.ndarray
    predictions: np.ndarray


def _user_block(
    S: SimilarityMatrix,
    data: RatingDataset,
    u: int,
    targets: np.ndarray,
    neighbor_limit: Optional[int],
    denominator_floor: float,
) -> UserNeighborhood:
    history, _, deviations = data.user_history(u)
    weights = S.values[np.ix_(targets, history)]
    active = targets[:, None] != history[None, :]

    if neighbor_limit is not None and neighbor_limit < len(history):
        ranking = np.where(active, np.abs(weights), -1.0)
        order = np.argsort(-ranking, axis=1, kind="stable")
        keep = np.zeros_like(active)
        keep[np.arange(len(targets))[:, None], order[:, : max(int(neighbor_limit), 0)]] = True
        active &= keep

    weights = np.where(active, weights, 0.0)
    denominators = np.maximum(np.abs(weights).sum(axis=1), denominator_floor)
    numerators = weights @ deviations
    with np.errstate(invalid="ignore", divide="ignore"):
        offsets = np.where(denominators > 0, numerators / denominators, 0.0)
    predictions = data.item_means[targets] + offsets
    return UserNeighborhood(targets, history, deviations, weights, active, denominators, predictions)


def _grouped_by_user(users: np.ndarray) -> Iterable[Tuple[int, np.ndarray]]:
    order = np.argsort(users, kind="stable")
    sorted_users = users[order]
    starts = np.flatnonzero(np.r_[True, sorted_users[1:] != sorted_users[:-1]]) if len(users) else []
    bounds = list(starts) + [len(users)]
    for k in range(len(bounds) - 1):
        yield int(sorted_users[bounds[k]]), order[bounds[k] : bounds[k + 1]]


def predict_pairs(
    S: SimilarityMatrix,
    data: RatingDataset,
    users: np.ndarray,
    items: np.ndarray,
    neighbor_limit: Optional[int] = None,
    denominator_floor: float = 0.0,
) -> np.ndarray:
    """Raw (unclamped) predictions for many (user, item) pairs."""
    S.check_bound(data)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(items) and (items.min() < 0 or items.max() >= data.n_items):
        raise DatasetError(f"item index out of range [0, {data.n_items})")
    out = np.empty(len(users), dtype=np.float64)
    for u, idx in _grouped_by_user(users):
        block = _user_block(S, data, u, items[idx], neighbor_limit, denominator_floor)
        out[idx] = block.predictions
    return out


def predict(
    S: SimilarityMatrix,
    data: RatingDataset,
    u: int,
    i: int,
    neighbor_limit: Optional[int] = None,
) -> float:
    """Mean-centered weighted average of the user's other ratings.

    Falls back to the item mean when the user has no other rating or all
    relevant similarities are zero.
    """
    data.check_user(u)
    data.check_item(i)
    return float(predict_pairs(S, data, np.array([u]), np.array([i]), neighbor_limit)[0])


def predict_context(S: SimilarityMatrix, data: RatingDataset, ctx: PredictionContext) -> float:
    return predict(S, data, ctx.user, ctx.item, ctx.neighbor_limit)


def neighborhood_sizes(
    S: SimilarityMatrix,
    data: RatingDataset,
    users: np.ndarray,
    items: np.ndarray,
    neighbor_limit: Optional[int] = None,
) -> np.ndarray:
    """Number of neighbors each prediction actually averages over."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    out = np.zeros(len(users), dtype=np.int64)
    for u, idx in _grouped_by_user(users):
        block = _user_block(S, data, u, items[idx], neighbor_limit, 0.0)
        out[idx] = block.active.sum(axis=1)
    return out


def training_predictions(
    S: SimilarityMatrix, data: RatingDataset, denominator_floor: float = 0.0
) -> np.ndarray:
    """Prediction of every observed rating from the rest of its user's history."""
    return predict_pairs(S, data, data.users, data.items, denominator_floor=denominator_floor)


def loss(S: SimilarityMatrix, data: RatingDataset, lam: float) -> float:
    """Sum of squared errors plus ``lam`` times the squared Frobenius norm of S."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    errors = training_predictions(S, data) - data.values
    return float(errors @ errors + lam * np.sum(S.values * S.values))


def train_rmse(S: SimilarityMatrix, data: RatingDataset, denominator_floor: float = 0.0) -> float:
    errors = training_predictions(S, data, denominator_floor) - data.values
    return float(np.sqrt(np.mean(errors * errors))) if len(errors) else 0.0


@dataclass
class BatchGradient:
    """Data term of the similarity gradient over one mini-batch."""

    matrix: np.ndarray
    rows: np.ndarray
    residuals: np.ndarray
    used_residuals: np.ndarray


def resolve_batch(data: RatingDataset, batch: PairBatch) -> np.ndarray:
    """Flat positions of a batch given as (user, item) pairs."""
    pairs = np.asarray(batch, dtype=np.int64).reshape(-1, 2)
    return data.positions(pairs[:, 0], pairs[:, 1])


def data_gradient(
    S: SimilarityMatrix,
    data: RatingDataset,
    positions: np.ndarray,
    residual_bound: Optional[float] = None,
    denominator_floor: float = 0.0,
) -> BatchGradient:
    """Accumulate e_ui * d(r_hat_ui)/dS_i over the ratings at ``positions``.

    Repeated positions contribute once per occurrence. Residuals are clamped
    to ``[-residual_bound, residual_bound]`` when a bound is given, and every
    denominator is floored at ``denominator_floor``. Only row i of each
    rating (u, i) is touched.
    """
    S.check_bound(data)
    positions = np.asarray(positions, dtype=np.int64)
    grad = np.zeros_like(S.values)
    residuals = np.zeros(len(positions))
    used = np.zeros(len(positions))
    batch_users = data.users[positions]
    batch_items = data.items[positions]
    batch_values = data.values[positions]

    for u, idx in _grouped_by_user(batch_users):
        block = _user_block(S, data, u, batch_items[idx], None, denominator_floor)
        e = block.predictions - batch_values[idx]
        residuals[idx] = e
        if residual_bound is not None:
            e = np.clip(e, -residual_bound, residual_bound)
        used[idx] = e

        centered = block.predictions - data.item_means[block.targets]
        with np.errstate(invalid="ignore", divide="ignore"):
            partial = (
                block.deviations[None, :] - centered[:, None] * np.sign(block.weights)
            ) / block.denominators[:, None]
        # zero-denominator rows fall back to the item mean and carry no gradient
        partial = np.where(block.active & (block.denominators[:, None] > 0), partial, 0.0)
        contribution = e[:, None] * partial
        rows = np.broadcast_to(block.targets[:, None], contribution.shape)
        cols = np.broadcast_to(block.history[None, :], contribution.shape)
        np.add.at(grad, (rows, cols), contribution)

    return BatchGradient(grad, np.unique(batch_items), residuals, used)


def gradient(S: SimilarityMatrix, data: RatingDataset, batch: PairBatch, lam: float) -> np.ndarray:
    """Gradient of half the loss restricted to ``batch``, plus ``lam * S``."""
    positions = resolve_batch(data, batch)
    return data_gradient(S, data, positions).matrix + lam * S.values


def denominator_profile(
    S: SimilarityMatrix,
    data: RatingDataset,
    quantiles: Sequence[float] = (0.0, 0.001, 0.01, 0.05, 0.25, 0.5),
) -> Tuple[np.ndarray, Dict[str, float]]:
    """Every prediction denominator sum_j |s_ij| over the observed ratings.

    Returns the raw denominators and a summary keyed by quantile, used to
    choose the lower bound C for a given rescale factor.
    """
    S.check_bound(data)
    out = np.zeros(data.n_ratings)
    for u, idx in _grouped_by_user(data.users):
        block = _user_block(S, data, u, data.items[idx], None, 0.0)
        out[idx] = np.abs(block.weights).sum(axis=1)
    summary = {f"q{q:g}": float(np.quantile(out, q)) for q in quantiles} if len(out) else {}
    if len(out):
        summary["mean"] = float(out.mean())
    return out, summary
