"""
Differentially private posterior sampling via SGLD.

The sampler runs stochastic gradient Langevin dynamics on the posterior of
the similarity matrix with the drift scaled by epsilon / 4B, where B bounds
each user's log-likelihood through the tau cap. Mini-batches are drawn with
replacement; the prior term is debiased with pair inclusion probabilities.
Releasing one retained sample is user-level epsilon-DP, up to the distance
between the chain's distribution and the true posterior.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..config import DppsConfig
from ..utils.seeding import SeedStreams
from .core import RatingDataset, SimilarityMatrix, data_gradient, loss, predict_pairs, train_rmse
from .errors import ConfigurationError, DatasetError, TrainingError


logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
RMSE_EVERY = 50

DELTA_CAVEAT = (
    "The guarantee is (epsilon, (1 + e^epsilon) * delta)-DP where delta is the L1 distance "
    "between the sampled distribution and the true posterior; delta -> 0 is assumed, "
    "not measured."
)


def step_size(t: int, initial_step: float, decay: float) -> float:
    """eta_t = eta_1 * t^(-xi)."""
    if t < 1:
        raise ValueError(f"iteration index must be >= 1, got {t}")
    return initial_step * float(t) ** (-decay)


def log_likelihood_bound(data: RatingDataset, tau: Optional[int] = None) -> float:
    """B = phi^2 * tau, the largest squared error mass one user can carry."""
    tau = tau if tau is not None else data.max_ratings_per_user
    if tau is None:
        raise ConfigurationError("dataset carries no tau cap; B cannot be derived")
    return data.phi ** 2 * tau


def resolve_bound(data: RatingDataset, cfg: DppsConfig) -> float:
    """B from the config, checked against the dataset's phi and tau."""
    if data.max_ratings_per_user is None:
        if cfg.log_likelihood_bound is None:
            raise ConfigurationError("dataset carries no tau cap; set log_likelihood_bound explicitly")
        return cfg.log_likelihood_bound
    derived = log_likelihood_bound(data)
    if cfg.log_likelihood_bound is not None and not np.isclose(cfg.log_likelihood_bound, derived):
        raise ConfigurationError(
            f"log_likelihood_bound={cfg.log_likelihood_bound} disagrees with phi^2 * tau = {derived}"
        )
    if int(data.user_counts.max(initial=0)) > data.max_ratings_per_user:
        raise ConfigurationError("a user exceeds the tau cap, so B does not bound the likelihood")
    return derived


@dataclass
class InclusionProbabilityMatrix:
    """Probability that items i and j both occur in a mini-batch."""

    H: np.ndarray

    @property
    def reciprocal(self) -> np.ndarray:
        return 1.0 / self.H


def compute_inclusion_matrix(data: RatingDataset, batch_size: int) -> InclusionProbabilityMatrix:
    """Pair inclusion matrix in the closed form used for with-replacement batches.

    H_ij = 1 - (|I_i||I_j| / L_tot^2) (1 - |I_j|/L_tot)^(L-1) (1 - |I_i|/L_tot)^(L-1),
    with a unit diagonal.
    """
    total = data.n_ratings
    if not 1 <= batch_size <= total:
        raise ConfigurationError(f"batch size must lie in [1, {total}], got {batch_size}")
    p = data.item_counts / total
    tail = (1.0 - p) ** (batch_size - 1)
    H = 1.0 - np.outer(p, p) * np.outer(tail, tail)
    np.fill_diagonal(H, 1.0)
    if np.any(H <= 0):
        raise DatasetError("degenerate dataset: an inclusion probability is zero")
    return InclusionProbabilityMatrix(H)


def exact_inclusion_matrix(data: RatingDataset, batch_size: int) -> InclusionProbabilityMatrix:
    """Pair inclusion matrix derived directly for L draws with replacement.

    P(i and j both drawn) = 1 - (1-p_i)^L - (1-p_j)^L + (1-p_i-p_j)^L. Pairs
    that can never co-occur get probability 1 (their prior term is never
    active, so the correction is irrelevant).
    """
    total = data.n_ratings
    if not 1 <= batch_size <= total:
        raise ConfigurationError(f"batch size must lie in [1, {total}], got {batch_size}")
    p = data.item_counts / total
    miss = (1.0 - p) ** batch_size
    both_miss = np.clip(1.0 - p[:, None] - p[None, :], 0.0, 1.0) ** batch_size
    H = 1.0 - miss[:, None] - miss[None, :] + both_miss
    unrated = data.item_counts == 0
    never = unrated[:, None] | unrated[None, :] | (H <= 1e-12)
    H = np.where(never, 1.0, np.clip(H, 0.0, 1.0))
    np.fill_diagonal(H, 1.0)
    return InclusionProbabilityMatrix(H)


def inclusion_matrix(data: RatingDataset, cfg: DppsConfig) -> InclusionProbabilityMatrix:
    if cfg.inclusion == "exact":
        return exact_inclusion_matrix(data, cfg.batch_size)
    return compute_inclusion_matrix(data, cfg.batch_size)


def sample_batch(data: RatingDataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Positions of a uniform with-replacement mini-batch."""
    return rng.integers(0, data.n_ratings, size=batch_size)


def pair_indicator(data: RatingDataset, positions: np.ndarray) -> np.ndarray:
    """Boolean M x M matrix: both items i and j occur in the batch (i != j)."""
    present = np.zeros(data.n_items, dtype=bool)
    present[data.items[positions]] = True
    indicator = np.outer(present, present)
    np.fill_diagonal(indicator, False)
    return indicator


def empirical_inclusion_matrix(
    data: RatingDataset, batch_size: int, draws: int, rng: np.random.Generator, chunk: int = 10_000
) -> np.ndarray:
    """Monte Carlo frequency with which each item pair co-occurs in a batch."""
    counts = np.zeros((data.n_items, data.n_items))
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        positions = rng.integers(0, data.n_ratings, size=(n, batch_size))
        present = np.zeros((n, data.n_items))
        rows = np.repeat(np.arange(n), batch_size)
        present[rows, data.items[positions].ravel()] = 1.0
        counts += present.T @ present
        done += n
    frequencies = counts / draws
    np.fill_diagonal(frequencies, 1.0)
    return frequencies


def inclusion_discrepancy(
    data: RatingDataset, batch_size: int, draws: int, rng: np.random.Generator
) -> Dict[str, float]:
    """Compare the closed-form H against measured co-occurrence frequencies."""
    measured = empirical_inclusion_matrix(data, batch_size, draws, rng)
    printed = compute_inclusion_matrix(data, batch_size).H
    exact = exact_inclusion_matrix(data, batch_size).H
    off = ~np.eye(data.n_items, dtype=bool)
    report = {
        "draws": float(draws),
        "printed_max_abs_error": float(np.max(np.abs(printed - measured)[off])) if off.any() else 0.0,
        "exact_max_abs_error": float(np.max(np.abs(exact - measured)[off])) if off.any() else 0.0,
    }
    logger.info(
        f"Inclusion check over {draws} batches: closed form off by {report['printed_max_abs_error']:.4f}, "
        f"direct derivation off by {report['exact_max_abs_error']:.4f}"
    )
    return report


def stochastic_gradient(
    S: SimilarityMatrix,
    data: RatingDataset,
    positions: np.ndarray,
    lam: float,
    H: InclusionProbabilityMatrix,
) -> np.ndarray:
    """Unbiased mini-batch estimate of the full log-posterior gradient.

    L_tot * mean data gradient over the batch, plus ``lam * S / H`` on the
    item pairs that occur in the batch. Residuals are not clamped.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) == 0:
        raise ConfigurationError("mini-batch must not be empty")
    step = data_gradient(S, data, positions)
    grad = (data.n_ratings / len(positions)) * step.matrix
    if lam:
        grad += lam * np.where(pair_indicator(data, positions), S.values * H.reciprocal, 0.0)
    return grad


@dataclass
class SgldTraceEntry:
    iteration: int
    step_size: float
    drift_norm: float
    noise_variance: float
    train_rmse: Optional[float] = None


@dataclass
class DppsRunRecord:
    """Everything a DPPS run reports besides the samples themselves."""

    epsilon: float
    bound: float
    burn_in: int
    thinning: int
    inclusion: str
    trace: List[SgldTraceEntry] = field(default_factory=list)
    retained: List[int] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def drift_scale(self) -> float:
        return self.epsilon / (4.0 * self.bound)

    @property
    def released_iteration(self) -> Optional[int]:
        return self.retained[-1] if self.retained else None

    def statement(self) -> str:
        return (
            f"{self.epsilon:g}-differential privacy at user level for one released sample "
            f"(B={self.bound:g}, drift scale epsilon/4B={self.drift_scale:g})"
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "B": self.bound,
            "drift_scale": self.drift_scale,
            "burn_in": self.burn_in,
            "thinning": self.thinning,
            "inclusion": self.inclusion,
            "retained_iterations": self.retained,
            "released_iteration": self.released_iteration,
            "granularity": "user",
            "statement": self.statement(),
            "caveat": DELTA_CAVEAT,
            "wall_time_s": self.wall_time,
            "trace": [entry.__dict__ for entry in self.trace],
        }


def train_dpps(
    data: RatingDataset,
    cfg: DppsConfig,
    S_init: SimilarityMatrix,
    inject_noise: bool = True,
    loss_history: Optional[List[float]] = None,
) -> Tuple[List[SimilarityMatrix], DppsRunRecord]:
    """Sample similarity matrices from the epsilon/4B-scaled posterior.

    Returns the retained post burn-in samples (the last one is the released
    model; earlier ones are only kept when ``cfg.average_samples`` is set)
    and the run record. ``inject_noise=False`` turns the sampler into
    preconditioned SGD.
    """
    if cfg.batch_size > data.n_ratings:
        raise ConfigurationError(
            f"batch size {cfg.batch_size} exceeds the number of training ratings {data.n_ratings}"
        )
    S_init.check_bound(data)
    bound = resolve_bound(data, cfg)
    record = DppsRunRecord(
        epsilon=cfg.epsilon,
        bound=bound,
        burn_in=cfg.burn_in,
        thinning=cfg.thinning,
        inclusion=cfg.inclusion,
    )
    if record.drift_scale > 1:
        logger.warning(f"epsilon={cfg.epsilon} exceeds 4B={4 * bound}; the drift is amplified")

    H = inclusion_matrix(data, cfg)
    streams = SeedStreams(cfg.seed)
    batch_rng = streams.generator("batch")
    noise_rng = streams.generator("noise")
    S = S_init.copy()
    values = S.values
    off_diagonal = ~np.eye(data.n_items, dtype=bool)
    samples: List[SimilarityMatrix] = []

    logger.info(
        f"Training DPPS: epsilon={cfg.epsilon}, B={bound:g}, scale={record.drift_scale:.5f}, "
        f"K={cfg.iterations}, burn-in={cfg.burn_in}, L={cfg.batch_size}"
    )
    started = time.perf_counter()
    for t in range(1, cfg.iterations + 1):
        eta = step_size(t, cfg.initial_step, cfg.decay)
        positions = sample_batch(data, cfg.batch_size, batch_rng)
        grad = stochastic_gradient(S, data, positions, cfg.regularization, H)
        drift = record.drift_scale * (eta / 2.0) * grad
        variance = cfg.temperature * eta if inject_noise else 0.0
        noise = sample_gaussian(variance, values.shape, noise_rng) * off_diagonal

        values -= drift
        values += noise
        np.fill_diagonal(values, 0.0)

        if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > DIVERGENCE_LIMIT:
            raise TrainingError(
                f"sampler diverged (|S| above {DIVERGENCE_LIMIT:g} or non-finite)", iteration=t
            )

        rmse = train_rmse(S, data) if t % RMSE_EVERY == 0 else None
        record.trace.append(
            SgldTraceEntry(t, eta, float(np.linalg.norm(drift)), variance, rmse)
        )
        if loss_history is not None:
            loss_history.append(loss(S, data, cfg.regularization))
        if rmse is not None:
            logger.debug(f"iteration {t}: eta={eta:.3e}, train RMSE={rmse:.4f}")

        if t > cfg.burn_in and (t - cfg.burn_in) % cfg.thinning == 0:
            # only averaging needs every retained matrix in memory
            if not cfg.average_samples:
                samples.clear()
            samples.append(S.copy())
            record.retained.append(t)

    if not samples:
        samples.append(S.copy())
        record.retained.append(cfg.iterations)
    record.wall_time = time.perf_counter() - started
    logger.info(f"DPPS finished in {record.wall_time:.2f}s with {len(samples)} retained samples")
    return samples, record


def sample_gaussian(variance: float, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """N(0, variance) draws; parameterised by variance, not standard deviation."""
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    return rng.normal(0.0, np.sqrt(variance), size=shape)


def released_sample(samples: List[SimilarityMatrix]) -> SimilarityMatrix:
    """The one sample a private release may publish: the last retained one."""
    if not samples:
        raise ConfigurationError("no samples were retained")
    return samples[-1]


def average_predictions(
    samples: List[SimilarityMatrix],
    data: RatingDataset,
    users: np.ndarray,
    items: np.ndarray,
    neighbor_limit: Optional[int] = None,
) -> np.ndarray:
    """Posterior predictive mean over retained samples.

    Non-private analysis only: every averaged sample spends its own budget.
    """
    if not samples:
        raise ConfigurationError("no samples to average")
    total = np.zeros(len(users))
    for sample in samples:
        total += predict_pairs(sample, data, users, items, neighbor_limit)
    return total / len(samples)
