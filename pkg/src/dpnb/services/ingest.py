"""
MovieLens ingestion, preprocessing and cross-validation folds.

Rows are read with pandas, validated with line numbers, filtered to users
with enough ratings, capped at tau ratings per user and remapped to dense
indices.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .core import RatingDataset
from .errors import ConfigurationError, DatasetError


logger = logging.getLogger(__name__)

MOVIELENS_SCALE = (1.0, 5.0)

FORMATS = {
    "ml100k": {"sep": "\t", "engine": "c"},
    "ml1m": {"sep": "::", "engine": "python"},
}

COLUMNS = ["user_id", "item_id", "rating", "timestamp"]


class RawRatingRecord(NamedTuple):
    """One row of a MovieLens ratings file, external ids preserved."""

    user_id: int
    item_id: int
    value: float
    timestamp: int


RecordsLike = Union[Sequence[RawRatingRecord], pd.DataFrame]


def parse_movielens(path: Path, format: str = "ml100k") -> List[RawRatingRecord]:
    """Parse a MovieLens ratings file.

    ``ml100k`` rows are tab separated, ``ml1m`` rows use ``::``. Errors name
    the 1-based line number of the first offending row.
    """
    if format not in FORMATS:
        raise ConfigurationError(f"unknown dataset format '{format}', expected one of {sorted(FORMATS)}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")

    options = FORMATS[format]
    try:
        frame = pd.read_csv(
            path,
            sep=options["sep"],
            engine=options["engine"],
            header=None,
            names=COLUMNS,
            dtype=str,
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError:
        raise DatasetError(f"dataset file is empty: {path}")
    except pd.errors.ParserError as e:
        raise DatasetError(f"malformed {format} file {path}: {e}")

    if frame.empty:
        raise DatasetError(f"dataset file is empty: {path}")

    numeric = pd.DataFrame(
        {column: pd.to_numeric(frame[column], errors="coerce") for column in COLUMNS}
    )
    malformed = numeric.isna().any(axis=1).to_numpy()
    if malformed.any():
        line = int(np.flatnonzero(malformed)[0]) + 1
        raise DatasetError(f"malformed {format} row: {frame.iloc[line - 1].tolist()!r}", line=line)

    ids = numeric[["user_id", "item_id", "timestamp"]]
    if not np.all(ids.to_numpy() == np.floor(ids.to_numpy())):
        bad = ~(ids == np.floor(ids)).all(axis=1).to_numpy()
        line = int(np.flatnonzero(bad)[0]) + 1
        raise DatasetError("user, item and timestamp must be integers", line=line)

    ratings = numeric["rating"].to_numpy()
    out_of_scale = (ratings < MOVIELENS_SCALE[0]) | (ratings > MOVIELENS_SCALE[1])
    if out_of_scale.any():
        line = int(np.flatnonzero(out_of_scale)[0]) + 1
        raise DatasetError(
            f"rating {ratings[line - 1]} outside [{MOVIELENS_SCALE[0]:g}, {MOVIELENS_SCALE[1]:g}]",
            line=line,
        )

    records = [
        RawRatingRecord(int(u), int(i), float(r), int(t))
        for u, i, r, t in zip(
            numeric["user_id"], numeric["item_id"], numeric["rating"], numeric["timestamp"]
        )
    ]
    logger.info(f"Parsed {len(records)} {format} ratings from {path}")
    return records


def _as_frame(records: RecordsLike) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        frame = records.rename(columns={"rating": "value"})
    else:
        frame = pd.DataFrame(list(records), columns=list(RawRatingRecord._fields))
    return frame[["user_id", "item_id", "value"]]


def preprocess(
    records: RecordsLike,
    min_ratings_per_user: int = 20,
    tau: int = 200,
    seed: int = 0,
    rating_scale: Tuple[float, float] = MOVIELENS_SCALE,
) -> RatingDataset:
    """Filter, cap and densely index raw ratings.

    Users with fewer than ``min_ratings_per_user`` ratings are dropped, users
    with more than ``tau`` ratings keep a uniform random subset of exactly
    ``tau`` of them. Timestamps are discarded.
    """
    if min_ratings_per_user < 1:
        raise ConfigurationError(f"min_ratings_per_user must be >= 1, got {min_ratings_per_user}")
    if tau < min_ratings_per_user:
        raise ConfigurationError(
            f"tau ({tau}) must be at least min_ratings_per_user ({min_ratings_per_user})"
        )

    frame = _as_frame(records)
    frame = frame.sort_values(["user_id", "item_id"], kind="mergesort").reset_index(drop=True)
    if frame.duplicated(["user_id", "item_id"]).any():
        first = frame[frame.duplicated(["user_id", "item_id"])].iloc[0]
        raise DatasetError(
            f"duplicate rating for user {int(first.user_id)}, item {int(first.item_id)}"
        )

    counts = frame.groupby("user_id")["value"].transform("size")
    frame = frame[counts >= min_ratings_per_user].reset_index(drop=True)
    if frame.empty:
        raise DatasetError(f"no user has at least {min_ratings_per_user} ratings")

    # uniform subsample without replacement: keep the tau smallest random keys per user
    rng = np.random.default_rng(seed)
    keys = pd.Series(rng.random(len(frame)), index=frame.index)
    rank = keys.groupby(frame["user_id"]).rank(method="first")
    capped = int((frame.groupby("user_id")["value"].size() > tau).sum())
    frame = frame[rank <= tau].reset_index(drop=True)

    user_ids = np.sort(frame["user_id"].unique())
    item_ids = np.sort(frame["item_id"].unique())
    users = np.searchsorted(user_ids, frame["user_id"].to_numpy())
    items = np.searchsorted(item_ids, frame["item_id"].to_numpy())

    data = RatingDataset(
        users,
        items,
        frame["value"].to_numpy(dtype=np.float64),
        n_users=len(user_ids),
        n_items=len(item_ids),
        rating_scale=rating_scale,
        max_ratings_per_user=tau,
        user_ids=user_ids,
        item_ids=item_ids,
    )
    logger.info(
        f"Preprocessed dataset: N={data.n_users}, M={data.n_items}, "
        f"ratings={data.n_ratings}, users capped at tau={tau}: {capped}"
    )
    return data


def dataset_records(data: RatingDataset) -> List[RawRatingRecord]:
    """Ratings of ``data`` as raw records with external ids (timestamp 0)."""
    user_ids = data.user_ids if data.user_ids is not None else np.arange(data.n_users)
    item_ids = data.item_ids if data.item_ids is not None else np.arange(data.n_items)
    return [
        RawRatingRecord(int(user_ids[u]), int(item_ids[i]), float(r), 0)
        for u, i, r in zip(data.users, data.items, data.values)
    ]


@dataclass
class FoldSplit:
    """Rating-level assignment of every observed rating to one of k folds."""

    k: int
    assignments: np.ndarray

    def test_positions(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_positions(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def train(self, data: RatingDataset, fold: int) -> RatingDataset:
        return data.subset(self.train_positions(fold))

    def test(self, data: RatingDataset, fold: int) -> RatingDataset:
        return data.subset(self.test_positions(fold))

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _violating_users(data: RatingDataset, assignments: np.ndarray, k: int) -> np.ndarray:
    # a user violates the constraint when every rating sits in the same fold
    per_user_fold = np.zeros((data.n_users, k), dtype=np.int64)
    np.add.at(per_user_fold, (data.users, assignments), 1)
    folds_used = (per_user_fold > 0).sum(axis=1)
    return np.flatnonzero((folds_used == 1) & (data.user_counts > 0))


def split_folds(data: RatingDataset, k: int = 5, seed: int = 0) -> FoldSplit:
    """Random rating-level partition into ``k`` folds of near-equal size.

    Every user keeps at least one training rating in every fold: when all of
    a user's ratings land in one fold, one of them trades fold labels with a
    rating of another user, which keeps the fold sizes unchanged.
    """
    if k < 2:
        raise ConfigurationError(f"fold count must be >= 2, got {k}")
    active = data.user_counts[data.user_counts > 0]
    if len(active) == 0:
        raise DatasetError("cannot split an empty dataset")
    if k > int(active.min()):
        raise ConfigurationError(
            f"k={k} exceeds the smallest per-user rating count ({int(active.min())})"
        )

    rng = np.random.default_rng(seed)
    n = data.n_ratings
    assignments = np.empty(n, dtype=np.int64)
    assignments[rng.permutation(n)] = np.arange(n) % k

    violating = _violating_users(data, assignments, k)
    repaired = 0
    while len(violating):
        u = int(violating[0])
        mine = data.user_order[data.user_indptr[u] : data.user_indptr[u + 1]]
        fold = int(assignments[mine[0]])
        own = int(rng.choice(mine))
        candidates = np.flatnonzero((assignments != fold) & (data.users != u))
        for other in rng.permutation(candidates):
            v = int(data.users[other])
            theirs = data.user_order[data.user_indptr[v] : data.user_indptr[v + 1]]
            remaining = assignments[theirs[theirs != other]]
            # v must still span at least two folds after receiving `fold`
            if np.any(remaining != fold):
                assignments[own], assignments[other] = assignments[other], fold
                break
        else:
            raise DatasetError(f"could not give user {u} a training rating in every fold")
        repaired += 1
        violating = _violating_users(data, assignments, k)

    if repaired:
        logger.debug(f"Reassigned {repaired} ratings to keep every user in training")
    return FoldSplit(k=k, assignments=assignments)
