"""
Evaluation harness: RMSE, cross-validation cells, neighbor-size sweeps.

A cell is one (model, epsilon, root seed, fold) combination. Cells are
independent and deterministic; the async driver fans them out to a process
pool and reassembles the results in cell order.
"""

import asyncio
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Awaitable, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..config import ModelConfig, SweepConfig
from ..utils.seeding import SeedStreams
from .baselines import compute_similarity, similarity_kind
from .core import RatingDataset, SimilarityMatrix, predict_pairs
from .dpps import average_predictions, released_sample, train_dpps
from .dpsgd import train_dpsgd, train_pnbm
from .errors import DpnbError, EvaluationError
from .ingest import split_folds


logger = logging.getLogger(__name__)

NON_PRIVATE = "non-private"
RESULT_COLUMNS = ["model", "epsilon", "fold", "seed", "neighbor_limit", "rmse", "wall_time_s"]


def rmse(predictions: Sequence[Tuple[float, float]]) -> float:
    """Root mean squared error over (predicted, actual) pairs."""
    pairs = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    return rmse_arrays(pairs[:, 0], pairs[:, 1])


def rmse_arrays(predicted: np.ndarray, actual: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if len(actual) == 0:
        raise EvaluationError("cannot compute RMSE on an empty test set")
    diff = predicted - actual
    return float(np.sqrt(np.mean(diff * diff)))


def clamped_rmse(predicted: np.ndarray, actual: np.ndarray, scale: Tuple[float, float]) -> float:
    """RMSE after clamping predictions to the rating scale."""
    clamped = np.clip(predicted, scale[0], scale[1])
    score = rmse_arrays(clamped, actual)
    # every actual rating lies inside the scale, so clamping can only help
    assert score <= rmse_arrays(predicted, actual) + 1e-12, "clamping increased RMSE"
    return score


@dataclass
class EvalRow:
    model: str
    epsilon: Union[float, str]
    fold: int
    seed: int
    neighbor_limit: int
    rmse: float
    wall_time_s: float = 0.0


@dataclass
class EvalReport:
    """Row-level RMSE results plus their aggregates."""

    rows: List[EvalRow] = field(default_factory=list)

    def extend(self, rows: Sequence[EvalRow]) -> None:
        self.rows.extend(rows)

    def to_frame(self, record_timing: bool = True) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(row) for row in self.rows], columns=RESULT_COLUMNS)
        if not record_timing:
            frame["wall_time_s"] = 0.0
        return frame

    def aggregates(self) -> pd.DataFrame:
        """Mean and standard deviation of RMSE per (model, epsilon, neighbor limit)."""
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=["model", "epsilon", "neighbor_limit", "mean_rmse", "std_rmse", "runs"])
        frame["epsilon"] = frame["epsilon"].astype(str)
        grouped = frame.groupby(["model", "epsilon", "neighbor_limit"], sort=False)["rmse"]
        table = grouped.agg(mean_rmse="mean", std_rmse="std", runs="size").reset_index()
        table["std_rmse"] = table["std_rmse"].fillna(0.0)
        return table

    def check_complete(self, folds: int, seeds: int) -> None:
        """Every aggregate cell must hold exactly folds x seeds rows."""
        for row in self.aggregates().itertuples():
            if row.runs != folds * seeds:
                raise EvaluationError(
                    f"{row.model} at epsilon={row.epsilon}, N={row.neighbor_limit} has "
                    f"{row.runs} rows, expected {folds * seeds}"
                )

    def rating_level(self, tau: Optional[int]) -> pd.DataFrame:
        """Mean RMSE against the average per-rating budget (epsilon / tau for DPPS)."""
        frame = self.to_frame()
        frame = frame[frame["epsilon"] != NON_PRIVATE].copy()
        if frame.empty:
            return pd.DataFrame(columns=["model", "epsilon", "epsilon_per_rating", "neighbor_limit", "mean_rmse"])
        frame["epsilon"] = frame["epsilon"].astype(float)
        divisor = np.where((frame["model"] == "dpps-pnbm") & (tau is not None), float(tau or 1), 1.0)
        frame["epsilon_per_rating"] = frame["epsilon"] / divisor
        grouped = frame.groupby(["model", "epsilon", "epsilon_per_rating", "neighbor_limit"], sort=False)
        return grouped["rmse"].mean().rename("mean_rmse").reset_index()


@dataclass
class TrainedModel:
    """A model fitted on one training fold, ready to be scored."""

    name: str
    epsilon: Union[float, str]
    fold: Optional[int]
    seed: int
    train: RatingDataset
    test: Optional[RatingDataset]
    similarity: SimilarityMatrix
    default_limit: Optional[int] = None
    samples: Optional[List[SimilarityMatrix]] = None
    run_record: Dict[str, Any] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def predict(self, users: np.ndarray, items: np.ndarray, neighbor_limit: Optional[int]) -> np.ndarray:
        if self.samples is not None and len(self.samples) > 1:
            return average_predictions(self.samples, self.train, users, items, neighbor_limit)
        return predict_pairs(self.similarity, self.train, users, items, neighbor_limit)

    def score(self, neighbor_limit: Optional[int]) -> float:
        if self.test is None:
            raise EvaluationError(f"{self.name} was trained without a held-out test set")
        predicted = self.predict(self.test.users, self.test.items, neighbor_limit)
        return clamped_rmse(predicted, self.test.values, self.train.rating_scale)


def fit_model(
    train: RatingDataset,
    model: ModelConfig,
    root_seed: int,
    fold: Optional[int] = None,
    test: Optional[RatingDataset] = None,
) -> TrainedModel:
    """Train ``model`` with seeds derived from the root seed.

    ``fold=None`` trains on the full dataset (own random streams, no test set).
    """
    streams = SeedStreams(root_seed)
    stream_key: Union[int, str] = fold if fold is not None else "full"
    train_seed = streams.child_seed("batch", stream_key)
    epsilon: Union[float, str] = model.epsilon if model.epsilon is not None else NON_PRIVATE
    started = time.perf_counter()
    record: Dict[str, Any] = {}
    samples = None

    if model.name in ("pcc", "cos"):
        similarity = compute_similarity(train, similarity_kind(model.name)).values
    elif model.name == "dpsgd-pnbm":
        cfg = model.dpsgd.model_copy(update={"seed": train_seed})
        S_init = SimilarityMatrix.initialize(train.n_items, streams.generator("init", stream_key))
        similarity, account = train_dpsgd(train, cfg, S_init)
        record = account.to_dict()
    elif model.name == "pnbm":
        cfg_pnbm = model.pnbm.model_copy(update={"seed": train_seed})
        S_init = SimilarityMatrix.initialize(train.n_items, streams.generator("init", stream_key))
        similarity = train_pnbm(train, cfg_pnbm, S_init)
    elif model.name == "dpps-pnbm":
        cfg_dpps = model.dpps.model_copy(update={"seed": train_seed})
        S_init = SimilarityMatrix.initialize(train.n_items, streams.generator("init", stream_key))
        samples, run = train_dpps(train, cfg_dpps, S_init)
        similarity = released_sample(samples)
        record = run.to_dict()
        if cfg_dpps.average_samples:
            # scoring uses every retained sample, not the single released one
            epsilon = NON_PRIVATE
            record["averaged_samples"] = len(samples)
        else:
            samples = None
    else:
        raise EvaluationError(f"unknown model '{model.name}'")

    return TrainedModel(
        name=model.name,
        epsilon=epsilon,
        fold=fold,
        seed=root_seed,
        train=train,
        test=test,
        similarity=similarity,
        default_limit=model.neighbor_limit,
        samples=samples,
        run_record=record,
        wall_time_s=time.perf_counter() - started,
    )


def neighbor_sweep(
    models: Sequence[TrainedModel], limits: Optional[Sequence[Optional[int]]] = None
) -> EvalReport:
    """Re-score trained models under several top-N truncations, without retraining.

    ``None`` in ``limits`` (or no limits at all) scores each model at its own
    default limit. Rows record ``M`` for an untruncated neighborhood.
    """
    report = EvalReport()
    for model in models:
        for limit in limits if limits else [model.default_limit]:
            if limit is None:
                limit = model.default_limit
            if limit is not None and not 1 <= limit:
                raise EvaluationError(f"neighbor limit must be positive, got {limit}")
            started = time.perf_counter()
            score = model.score(limit)
            report.rows.append(
                EvalRow(
                    model=model.name,
                    epsilon=model.epsilon,
                    fold=model.fold if model.fold is not None else -1,
                    seed=model.seed,
                    neighbor_limit=int(limit) if limit is not None else model.train.n_items,
                    rmse=score,
                    wall_time_s=model.wall_time_s + time.perf_counter() - started,
                )
            )
    return report


@dataclass
class CellSpec:
    """One independent unit of evaluation work."""

    model: ModelConfig
    seed: int
    fold: int
    k: int
    neighbor_limits: Optional[List[int]] = None

    def key(self) -> str:
        payload = json.dumps(
            {
                "model": self.model.model_dump(mode="json"),
                "seed": self.seed,
                "fold": self.fold,
                "k": self.k,
                "neighbor_limits": self.neighbor_limits,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def describe(self) -> str:
        epsilon = self.model.epsilon
        budget = f"epsilon={epsilon:g}" if epsilon is not None else NON_PRIVATE
        return f"{self.model.name} {budget} seed={self.seed} fold={self.fold}"


def run_cell(data: RatingDataset, cell: CellSpec) -> List[EvalRow]:
    """Split, train and score one cell. Errors are annotated with fold and seed."""
    try:
        streams = SeedStreams(cell.seed)
        split = split_folds(data, cell.k, streams.child_seed("fold"))
        train_positions = split.train_positions(cell.fold)
        test_positions = split.test_positions(cell.fold)
        assert not np.intersect1d(train_positions, test_positions).size, "test rating leaked into training"
        train = data.subset(train_positions)
        test = data.subset(test_positions)
        model = fit_model(train, cell.model, cell.seed, cell.fold, test)
        rows = neighbor_sweep([model], cell.neighbor_limits).rows
        logger.info(f"Finished {cell.describe()}: RMSE={rows[0].rmse:.4f}")
        return rows
    except DpnbError as e:
        raise EvaluationError(f"{cell.describe()}: {e}") from e


def expand_sweep(base: ModelConfig, sweep: SweepConfig, tau: Optional[int]) -> List[ModelConfig]:
    """One model configuration per (model, epsilon) point of the sweep grid.

    DPPS budgets come from ``epsilon_per_rating`` (times tau) when given, and
    from ``epsilons`` otherwise. Hyper-parameter blocks are taken from ``base``.
    """
    models: List[ModelConfig] = []
    for name in sweep.models:
        model = base.model_copy(update={"name": name})
        if name == "dpsgd-pnbm":
            budgets = sweep.epsilons or [model.dpsgd.epsilon]
        elif name == "dpps-pnbm":
            if sweep.epsilon_per_rating:
                if tau is None:
                    raise EvaluationError("epsilon_per_rating needs a dataset with a tau cap")
                budgets = [x * tau for x in sweep.epsilon_per_rating]
            else:
                budgets = sweep.epsilons or [model.dpps.epsilon]
        else:
            models.append(model)
            continue
        models.extend(model.with_epsilon(epsilon) for epsilon in budgets)
    return models


def build_cells(
    model: ModelConfig,
    k: int,
    seeds: Sequence[int],
    neighbor_limits: Optional[Sequence[int]] = None,
) -> List[CellSpec]:
    limits = list(neighbor_limits) if neighbor_limits else None
    return [CellSpec(model, seed, fold, k, limits) for seed in seeds for fold in range(k)]


CellOutcome = Union[List[EvalRow], BaseException]


async def run_cells(
    data: RatingDataset,
    cells: Sequence[CellSpec],
    threads: int = 1,
    on_done: Optional[Callable[[CellSpec, CellOutcome], Awaitable[None]]] = None,
) -> List[CellOutcome]:
    """Run cells with at most ``threads`` in flight; outcomes keep cell order."""
    loop = asyncio.get_running_loop()
    semaphore = asyncio.Semaphore(max(threads, 1))
    executor = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None

    async def one(cell: CellSpec) -> CellOutcome:
        async with semaphore:
            try:
                if executor is None:
                    outcome: CellOutcome = run_cell(data, cell)
                else:
                    outcome = await loop.run_in_executor(executor, run_cell, data, cell)
            except Exception as e:
                logger.error(f"Cell failed: {e}")
                outcome = e
            if on_done is not None:
                await on_done(cell, outcome)
            return outcome

    try:
        return list(await asyncio.gather(*(one(cell) for cell in cells)))
    finally:
        if executor is not None:
            executor.shutdown()


async def run_cv_async(
    data: RatingDataset,
    model: ModelConfig,
    k: int = 5,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    neighbor_limits: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> EvalReport:
    cells = build_cells(model, k, seeds, neighbor_limits)
    outcomes = await run_cells(data, cells, threads)
    report = EvalReport()
    for outcome in outcomes:
        if isinstance(outcome, BaseException):
            raise outcome
        report.extend(outcome)
    report.check_complete(k, len(seeds))
    return report


def run_cv(
    data: RatingDataset,
    model: ModelConfig,
    k: int = 5,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    neighbor_limits: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> EvalReport:
    """k-fold cross-validation of one model over several root seeds."""
    return asyncio.run(run_cv_async(data, model, k, seeds, neighbor_limits, threads))
