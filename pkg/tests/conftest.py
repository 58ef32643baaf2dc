"""Shared fixtures: small synthetic rating sets with known structure."""

from pathlib import Path
from typing import List

import numpy as np
import pytest

from dpnb.services.core import RatingDataset, SimilarityMatrix
from dpnb.services.ingest import RawRatingRecord, preprocess


def make_records(
    n_users: int = 30, n_items: int = 12, low: int = 8, high: int = 12, seed: int = 7
) -> List[RawRatingRecord]:
    """Ratings driven by user and item biases; external ids are sparse on purpose."""
    rng = np.random.default_rng(seed)
    user_bias = rng.normal(0.0, 0.5, n_users)
    item_bias = rng.normal(0.0, 0.7, n_items)
    records = []
    for u in range(n_users):
        count = int(rng.integers(low, high + 1))
        for i in rng.choice(n_items, size=count, replace=False):
            value = np.clip(np.round(3.3 + user_bias[u] + item_bias[i] + rng.normal(0, 0.6)), 1, 5)
            records.append(RawRatingRecord(u + 1, 100 + 3 * int(i), float(value), 880000000 + u))
    return records


def random_instance(seed: int, n_users: int = 4, n_items: int = 5) -> RatingDataset:
    """Small dense-ish dataset; every user rates at least two items."""
    rng = np.random.default_rng(seed)
    users, items, values = [], [], []
    for u in range(n_users):
        count = int(rng.integers(2, n_items + 1))
        for i in np.sort(rng.choice(n_items, size=count, replace=False)):
            users.append(u)
            items.append(int(i))
            values.append(float(rng.integers(1, 6)))
    return RatingDataset(users, items, values, n_users, n_items)


def random_similarity(n_items: int, seed: int) -> SimilarityMatrix:
    """Mixed-sign entries bounded away from zero (the |s| kink)."""
    rng = np.random.default_rng(seed)
    magnitude = rng.uniform(0.2, 1.0, size=(n_items, n_items))
    sign = rng.choice([-1.0, 1.0], size=(n_items, n_items), p=[0.25, 0.75])
    values = magnitude * sign
    np.fill_diagonal(values, 0.0)
    return SimilarityMatrix(values)


@pytest.fixture
def records() -> List[RawRatingRecord]:
    return make_records()


@pytest.fixture
def dataset(records) -> RatingDataset:
    """About 300 ratings from 30 users on 12 items, capped at tau = 10."""
    return preprocess(records, min_ratings_per_user=5, tau=10, seed=0)


@pytest.fixture
def ml100k_file(tmp_path, records) -> Path:
    path = tmp_path / "u.data"
    path.write_text(
        "".join(f"{r.user_id}\t{r.item_id}\t{int(r.value)}\t{r.timestamp}\n" for r in records)
    )
    return path

