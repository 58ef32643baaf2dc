import numpy as np
import pytest
from pytest import approx

from dpnb.config import BaselineConfig, DppsConfig, DpSgdConfig, ModelConfig, SweepConfig
from dpnb.services.errors import EvaluationError
from dpnb.services.evaluation import (
    NON_PRIVATE,
    RESULT_COLUMNS,
    CellSpec,
    EvalReport,
    EvalRow,
    build_cells,
    clamped_rmse,
    expand_sweep,
    fit_model,
    neighbor_sweep,
    rmse,
    run_cell,
    run_cv,
)
from dpnb.services.ingest import split_folds
from dpnb.utils.seeding import SeedStreams


def test_rmse_examples():
    assert rmse([(3, 3), (4, 4)]) == 0.0
    assert rmse([(2, 3), (4, 3)]) == approx(1.0)
    assert rmse([(5, 1)]) == approx(4.0)


def test_rmse_of_nothing():
    with pytest.raises(EvaluationError):
        rmse([])


def test_clamping_never_hurts():
    rng = np.random.default_rng(0)
    actual = rng.integers(1, 6, size=200).astype(float)
    predicted = actual + rng.normal(0, 2, size=200)
    assert clamped_rmse(predicted, actual, (1.0, 5.0)) <= rmse(list(zip(predicted, actual)))


def rows(*values, model="pcc", epsilon=NON_PRIVATE):
    return [EvalRow(model, epsilon, fold, 0, 12, value) for fold, value in enumerate(values)]


def test_aggregate_mean_equals_row_mean():
    report = EvalReport(rows(0.9, 1.0, 1.1))
    report.extend(rows(1.2, 1.4, model="dpsgd-pnbm", epsilon=1.0))
    table = report.aggregates()
    assert list(table["mean_rmse"]) == approx([1.0, 1.3])
    assert list(table["runs"]) == [3, 2]
    assert table["std_rmse"].iloc[0] == approx(0.1)


def test_single_run_has_zero_std():
    table = EvalReport(rows(0.95)).aggregates()
    assert table["std_rmse"].iloc[0] == 0.0


def test_check_complete():
    report = EvalReport(rows(0.9, 1.0))
    report.check_complete(folds=2, seeds=1)
    with pytest.raises(EvaluationError):
        report.check_complete(folds=5, seeds=1)


def test_rating_level_divides_dpps_budgets():
    report = EvalReport(rows(1.0, model="dpps-pnbm", epsilon=40.0))
    report.extend(rows(1.1, model="dpsgd-pnbm", epsilon=1.0))
    report.extend(rows(0.9))
    table = report.rating_level(tau=200).set_index("model")
    assert table.loc["dpps-pnbm", "epsilon_per_rating"] == approx(0.2)
    assert table.loc["dpsgd-pnbm", "epsilon_per_rating"] == approx(1.0)
    assert "pcc" not in table.index


def test_frame_columns_and_timing():
    report = EvalReport([EvalRow("pcc", NON_PRIVATE, 0, 0, 12, 1.0, wall_time_s=3.2)])
    assert list(report.to_frame().columns) == RESULT_COLUMNS
    assert report.to_frame(record_timing=False)["wall_time_s"].iloc[0] == 0.0


def test_cross_validation_rows(dataset):
    report = run_cv(dataset, ModelConfig(name="pcc"), k=5, seeds=[0, 1])
    frame = report.to_frame()
    assert len(frame) == 10
    assert sorted(set(frame["fold"])) == [0, 1, 2, 3, 4]
    assert set(frame["epsilon"]) == {NON_PRIVATE}
    assert np.all((frame["rmse"] > 0) & (frame["rmse"] < 4))


def test_cross_validation_is_deterministic(dataset):
    a = run_cv(dataset, ModelConfig(name="cos"), k=3, seeds=[7]).to_frame(record_timing=False)
    b = run_cv(dataset, ModelConfig(name="cos"), k=3, seeds=[7]).to_frame(record_timing=False)
    assert a.equals(b)


def test_full_limit_equals_default(dataset):
    default = run_cv(dataset, ModelConfig(name="pcc"), k=3, seeds=[0]).to_frame()
    limited = run_cv(dataset, ModelConfig(name="pcc"), k=3, seeds=[0], neighbor_limits=[dataset.n_items]).to_frame()
    np.testing.assert_array_equal(default["rmse"].to_numpy(), limited["rmse"].to_numpy())


def test_neighbor_sweep_reuses_one_model(dataset):
    split = split_folds(dataset, 3, seed=1)
    train, test = split.train(dataset, 0), split.test(dataset, 0)
    model = fit_model(train, ModelConfig(name="pcc"), root_seed=0, fold=0, test=test)
    report = neighbor_sweep([model], [1, 5, None])
    limits = [row.neighbor_limit for row in report.rows]
    assert limits == [1, 5, 900]
    assert report.rows[0].rmse != report.rows[2].rmse


def test_full_data_fit_has_no_score(dataset):
    model = fit_model(dataset, ModelConfig(name="cos"), root_seed=0)
    assert model.fold is None
    with pytest.raises(EvaluationError):
        model.score(None)


def test_private_fit_carries_ledger(dataset):
    model = ModelConfig(name="dpsgd-pnbm", dpsgd=DpSgdConfig(iterations=3, batch_size=40, learning_rate=0.01))
    fitted = fit_model(dataset, model, root_seed=2)
    assert fitted.epsilon == 1.0
    assert len(fitted.run_record["ledger"]) == 3
    assert fitted.similarity.beta == model.dpsgd.rescale


def test_cell_errors_name_the_cell(dataset):
    model = ModelConfig(name="dpsgd-pnbm", dpsgd=DpSgdConfig(batch_size=10**6))
    cell = CellSpec(model, seed=3, fold=1, k=5)
    with pytest.raises(EvaluationError) as info:
        run_cell(dataset, cell)
    assert "seed=3 fold=1" in str(info.value)


def test_cell_keys_are_stable():
    a = CellSpec(ModelConfig(name="pcc"), 0, 1, 5)
    b = CellSpec(ModelConfig(name="pcc"), 0, 1, 5)
    assert a.key() == b.key()
    assert a.key() != CellSpec(ModelConfig(name="pcc"), 0, 2, 5).key()


def test_build_cells_covers_seeds_and_folds():
    cells = build_cells(ModelConfig(name="pcc"), 5, [0, 1, 2])
    assert len(cells) == 15
    assert {(c.seed, c.fold) for c in cells} == {(s, f) for s in range(3) for f in range(5)}


def test_sweep_expansion():
    sweep = SweepConfig(
        models=["dpsgd-pnbm", "dpps-pnbm", "pcc", "cos"],
        epsilons=[0.1, 0.5, 1.0, 2.0, 4.0],
        epsilon_per_rating=[0.1, 0.2],
    )
    models = expand_sweep(ModelConfig(name="pcc"), sweep, tau=200)
    assert len(models) == 5 + 2 + 1 + 1
    dpps = [m.epsilon for m in models if m.name == "dpps-pnbm"]
    assert dpps == approx([20.0, 40.0])
    assert [m.epsilon for m in models if m.name == "pcc"] == [None]


def test_sweep_without_budgets_uses_block_defaults():
    models = expand_sweep(ModelConfig(name="pcc"), SweepConfig(models=["dpsgd-pnbm"]), tau=None)
    assert [m.epsilon for m in models] == [DpSgdConfig().epsilon]
    with pytest.raises(EvaluationError):
        expand_sweep(ModelConfig(name="pcc"), SweepConfig(models=["dpps-pnbm"], epsilon_per_rating=[0.1]), tau=None)


def test_fold_stream_is_shared_across_models(dataset):
    # every model sees the same split for a given root seed
    seed = SeedStreams(4).child_seed("fold")
    a = split_folds(dataset, 5, seed)
    b = split_folds(dataset, 5, seed)
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_averaged_dpps_rows_carry_no_budget(dataset):
    dpps = DppsConfig(epsilon=32.0, initial_step=1e-4, iterations=30, burn_in=10, thinning=5, batch_size=50)
    released = run_cv(dataset, ModelConfig(name="dpps-pnbm", dpps=dpps), k=2, seeds=[0]).to_frame()
    assert set(released["epsilon"]) == {32.0}

    averaged = ModelConfig(name="dpps-pnbm", dpps=dpps.model_copy(update={"average_samples": True}))
    report = run_cv(dataset, averaged, k=2, seeds=[0])
    assert set(report.to_frame()["epsilon"]) == {NON_PRIVATE}
    assert report.rating_level(tau=10).empty


def test_baseline_cap_is_the_scoring_default(dataset):
    split = split_folds(dataset, 3, seed=1)
    train, test = split.train(dataset, 0), split.test(dataset, 0)
    capped = fit_model(train, ModelConfig(name="pcc", baseline=BaselineConfig(neighbor_limit=1)), 0, 0, test)
    uncapped = fit_model(train, ModelConfig(name="pcc"), 0, 0, test)
    assert capped.default_limit == 1
    assert capped.score(None) == capped.score(1)
    assert capped.score(None) != uncapped.score(None)
