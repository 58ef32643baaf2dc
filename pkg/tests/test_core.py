import numpy as np
import pytest
from pytest import approx, mark

from dpnb.services.core import (
    PredictionContext,
    RatingDataset,
    SimilarityMatrix,
    data_gradient,
    denominator_profile,
    gradient,
    loss,
    neighborhood_sizes,
    predict,
    predict_context,
    predict_pairs,
    train_rmse,
)
from dpnb.services.errors import DatasetError

from .conftest import random_instance, random_similarity

ZERO_MEAN_SCALE = (-5.0, 5.0)


def brute_predict(S, data, u, i):
    """Scalar transcription of the mean-centered neighborhood rule."""
    numerator, denominator = 0.0, 0.0
    for k in range(data.n_ratings):
        if data.users[k] != u or data.items[k] == i:
            continue
        j = data.items[k]
        numerator += S.values[i, j] * (data.values[k] - data.item_means[j])
        denominator += abs(S.values[i, j])
    if denominator == 0:
        return data.item_means[i]
    return data.item_means[i] + numerator / denominator


def test_weighted_mean_of_two_neighbors():
    # item means are all zero: j1 and j2 are mirrored by user 1, item 0 is rated 0
    data = RatingDataset(
        users=[0, 0, 1, 1, 1],
        items=[1, 2, 1, 2, 0],
        values=[5, 1, -5, -1, 0],
        n_users=2,
        n_items=3,
        rating_scale=ZERO_MEAN_SCALE,
    )
    S = SimilarityMatrix.zeros(3)
    S.values[0, 1] = 2.0
    S.values[0, 2] = 1.0
    assert predict(S, data, 0, 0) == approx(11 / 3)
    assert predict(S, data, 0, 0) == approx(brute_predict(S, data, 0, 0))


def test_single_neighbor_prediction():
    data = RatingDataset([0, 1, 1], [1, 1, 0], [4, -4, 0], 2, 2, rating_scale=ZERO_MEAN_SCALE)
    S = SimilarityMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert predict(S, data, 0, 0) == approx(4.0)


def test_empty_neighborhood_falls_back_to_item_mean():
    data = RatingDataset([0, 1, 1], [0, 0, 1], [2, 4, 5], 3, 2)
    S = SimilarityMatrix(np.ones((2, 2)))
    # user 0 only rated the target item itself; user 2 rated nothing
    assert predict(S, data, 0, 0) == approx(3.0)
    assert predict(S, data, 2, 1) == approx(5.0)


def test_zero_similarities_fall_back_to_item_mean():
    data = random_instance(3)
    S = SimilarityMatrix.zeros(data.n_items)
    predictions = predict_pairs(S, data, data.users, data.items)
    np.testing.assert_allclose(predictions, data.item_means[data.items])


def test_index_and_dimension_errors():
    data = random_instance(0)
    S = random_similarity(data.n_items, 0)
    with pytest.raises(DatasetError):
        predict(S, data, data.n_users, 0)
    with pytest.raises(DatasetError):
        predict(S, data, 0, data.n_items)
    with pytest.raises(DatasetError):
        predict(SimilarityMatrix.zeros(data.n_items + 1), data, 0, 0)


@mark.parametrize("seed", range(5))
def test_predictions_match_scalar_rule(seed):
    data = random_instance(seed)
    S = random_similarity(data.n_items, seed)
    for u in range(data.n_users):
        for i in range(data.n_items):
            assert predict(S, data, u, i) == approx(brute_predict(S, data, u, i), rel=1e-12)


def test_row_rescaling_leaves_predictions_unchanged():
    data = random_instance(11)
    S = random_similarity(data.n_items, 11)
    scaled = S.copy()
    scaled.values[2] *= 7.5
    before = predict_pairs(S, data, data.users, data.items)
    after = predict_pairs(scaled, data, data.users, data.items)
    np.testing.assert_allclose(before, after, rtol=1e-12)


def test_self_similarity_is_ignored():
    data = random_instance(5)
    S = random_similarity(data.n_items, 5)
    u, i = int(data.users[0]), int(data.items[0])
    before = predict(S, data, u, i)
    S.values[i, i] = 123.0
    assert predict(S, data, u, i) == approx(before, rel=1e-15)


def test_full_neighbor_limit_is_untruncated():
    data = random_instance(8)
    S = random_similarity(data.n_items, 8)
    full = predict_pairs(S, data, data.users, data.items)
    limited = predict_pairs(S, data, data.users, data.items, neighbor_limit=data.n_items)
    np.testing.assert_array_equal(full, limited)


def test_neighbor_limit_keeps_largest_magnitudes():
    data = RatingDataset([0, 0, 0, 1, 1, 1, 1], [1, 2, 3, 0, 1, 2, 3], [5, 1, 3, 3, 1, 3, 3], 2, 4)
    S = SimilarityMatrix.zeros(4)
    S.values[0, 1:] = [0.5, -0.9, 0.5]
    ctx = PredictionContext(user=0, item=0, neighbor_limit=1)
    assert ctx.excluded_item == 0
    # only item 2 (|s| = 0.9) survives
    expected = data.item_means[0] + (-0.9 * (1 - data.item_means[2])) / 0.9
    assert predict_context(S, data, ctx) == approx(expected)
    # ties between items 1 and 3 go to the smaller index
    S.values[0, 2] = 0.1
    expected = data.item_means[0] + (5 - data.item_means[1])
    assert predict(S, data, 0, 0, neighbor_limit=1) == approx(expected)


def test_neighbor_limit_one_uses_exactly_one_neighbor(dataset):
    S = SimilarityMatrix.initialize(dataset.n_items, np.random.default_rng(0))
    sizes = neighborhood_sizes(S, dataset, dataset.users, dataset.items, neighbor_limit=1)
    assert np.all(sizes == 1)


def test_loss_zero_when_means_are_exact():
    data = RatingDataset([0, 1, 0, 1], [0, 0, 1, 1], [4, 4, 2, 2], 2, 2)
    assert loss(SimilarityMatrix.zeros(2), data, 0.0) == 0.0


def test_loss_of_mean_predictions():
    data = RatingDataset([0, 1], [0, 0], [5, 1], 2, 1)
    # both predictions fall back to the item mean 3
    assert loss(SimilarityMatrix.zeros(1), data, 0.0) == approx(8.0)


@mark.parametrize("seed", range(5))
def test_loss_matches_double_loop(seed):
    data = random_instance(seed)
    S = random_similarity(data.n_items, seed + 100)
    lam = 0.3
    expected = sum(
        (brute_predict(S, data, int(data.users[k]), int(data.items[k])) - data.values[k]) ** 2
        for k in range(data.n_ratings)
    )
    expected += lam * sum(S.values[i, j] ** 2 for i in range(data.n_items) for j in range(data.n_items))
    assert loss(S, data, lam) == approx(expected, rel=1e-12)
    assert loss(S, data, lam) >= 0


def test_loss_rejects_negative_lambda():
    data = random_instance(0)
    with pytest.raises(ValueError):
        loss(SimilarityMatrix.zeros(data.n_items), data, -0.1)


def finite_difference(S, data, lam, h=1e-5):
    grad = np.zeros_like(S.values)
    for i in range(S.n_items):
        for j in range(S.n_items):
            plus, minus = S.copy(), S.copy()
            plus.values[i, j] += h
            minus.values[i, j] -= h
            grad[i, j] = (loss(plus, data, lam) - loss(minus, data, lam)) / (2 * h)
    return grad


@mark.parametrize("lam", [0.0, 0.1])
@mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed, lam):
    rng = np.random.default_rng(seed)
    data = random_instance(seed, n_users=int(rng.integers(2, 6)), n_items=int(rng.integers(3, 7)))
    S = random_similarity(data.n_items, seed + 1000)
    pairs = np.stack([data.users, data.items], axis=1)
    analytic = gradient(S, data, pairs, lam)
    # gradient() differentiates half the loss
    numeric = 0.5 * finite_difference(S, data, lam)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-6)


def test_gradient_vanishes_with_exact_predictions():
    data = RatingDataset([0, 1, 0, 1, 2], [0, 0, 1, 1, 2], [4, 4, 2, 2, 3], 3, 3)
    S = random_similarity(3, 1)
    pairs = np.stack([data.users, data.items], axis=1)
    np.testing.assert_array_equal(gradient(S, data, pairs, 0.0), np.zeros((3, 3)))


def test_empty_batch_gradient_is_the_regularizer():
    data = random_instance(2)
    S = random_similarity(data.n_items, 2)
    np.testing.assert_array_equal(gradient(S, data, [], 1.0), S.values)


def test_gradient_rejects_unobserved_pairs():
    data = RatingDataset([0, 1], [0, 1], [3, 4], 2, 2)
    with pytest.raises(DatasetError):
        gradient(SimilarityMatrix.zeros(2), data, [(0, 1)], 0.0)


def test_data_gradient_touches_only_batch_rows():
    data = random_instance(4)
    S = random_similarity(data.n_items, 4)
    step = data_gradient(S, data, np.array([0]))
    touched = np.flatnonzero(np.any(step.matrix != 0, axis=1))
    assert set(touched) <= {int(data.items[0])}
    np.testing.assert_array_equal(step.rows, [data.items[0]])


def test_residual_bound_clamps():
    data = random_instance(6)
    S = random_similarity(data.n_items, 6)
    step = data_gradient(S, data, np.arange(data.n_ratings), residual_bound=0.25)
    assert np.all(np.abs(step.used_residuals) <= 0.25)
    np.testing.assert_allclose(step.used_residuals, np.clip(step.residuals, -0.25, 0.25))


def test_denominator_floor_raises_small_denominators():
    data = RatingDataset([0, 0, 1, 1], [0, 1, 0, 1], [5, 1, 1, 5], 2, 2)
    S = SimilarityMatrix(np.array([[0.0, 0.1], [0.1, 0.0]]))
    plain = predict_pairs(S, data, data.users, data.items)
    floored = predict_pairs(S, data, data.users, data.items, denominator_floor=1.0)
    # deviation shrinks by the ratio |s| / C = 0.1
    np.testing.assert_allclose(floored - data.item_means[data.items], 0.1 * (plain - data.item_means[data.items]))


def test_train_rmse_of_item_means():
    data = RatingDataset([0, 1], [0, 0], [5, 1], 2, 1)
    assert train_rmse(SimilarityMatrix.zeros(1), data) == approx(2.0)


def test_denominator_profile_counts_neighbors():
    data = random_instance(9)
    S = SimilarityMatrix(np.ones((data.n_items, data.n_items)))
    denominators, summary = denominator_profile(S, data)
    expected = data.user_counts[data.users] - 1
    np.testing.assert_allclose(denominators, expected)
    assert summary["q0"] == approx(expected.min())
    assert summary["mean"] == approx(expected.mean())


def test_dataset_validation():
    with pytest.raises(DatasetError):
        RatingDataset([0, 0], [1, 1], [3, 4], 1, 2)
    with pytest.raises(DatasetError):
        RatingDataset([0], [2], [3], 1, 2)
    with pytest.raises(DatasetError):
        RatingDataset([0], [0], [6], 1, 1)
    with pytest.raises(DatasetError):
        RatingDataset([0, 1], [0], [3], 2, 1)


def test_cold_items_get_the_scale_midpoint():
    data = RatingDataset([0], [0], [5], 1, 3)
    assert data.item_means[1] == 3.0
    assert data.item_means[2] == 3.0


def test_subset_keeps_dimensions(dataset):
    part = dataset.subset(np.arange(10))
    assert part.n_users == dataset.n_users
    assert part.n_items == dataset.n_items
    assert part.n_ratings == 10


def test_positions_lookup(dataset):
    k = np.array([5, 17, 3])
    np.testing.assert_array_equal(dataset.positions(dataset.users[k], dataset.items[k]), k)


def test_top_n_mask_ties_and_diagonal():
    S = SimilarityMatrix(np.array([[9.0, 1.0, 1.0], [0.5, 9.0, -2.0], [0.0, 0.0, 9.0]]))
    keep = S.top_n_mask(1)
    np.testing.assert_array_equal(
        keep, [[False, True, False], [False, False, True], [True, False, False]]
    )


def test_similarity_export_formats():
    S = random_similarity(4, 3)
    payload = S.to_bytes()
    assert payload[:4] == b"DPNB"
    assert len(payload) == 8 + 8 * 16
    np.testing.assert_array_equal(SimilarityMatrix.from_bytes(payload).values, S.values)

    triples = S.to_triples(top_n=2)
    assert list(triples.columns) == ["item_i", "item_j", "value"]
    assert len(triples) == 8
    restored = SimilarityMatrix.from_triples(triples, 4)
    np.testing.assert_array_equal(restored.values, S.truncated(2).values)

    with pytest.raises(DatasetError):
        SimilarityMatrix.from_bytes(b"NOPE" + payload[4:])


def test_symmetrized_averages_transpose():
    S = random_similarity(5, 2)
    sym = S.symmetrized().values
    np.testing.assert_allclose(sym, sym.T)
    np.testing.assert_allclose(sym, (S.values + S.values.T) / 2)


def test_initialize_range_and_diagonal():
    S = SimilarityMatrix.initialize(6, np.random.default_rng(1))
    off = ~np.eye(6, dtype=bool)
    assert np.all((S.values[off] >= 0.5) & (S.values[off] < 1.0))
    assert np.all(np.diag(S.values) == 0)
