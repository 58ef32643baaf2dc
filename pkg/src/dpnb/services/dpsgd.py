"""
Differentially private SGD for the probabilistic neighborhood model.

Each iteration samples a mini-batch, clamps the residuals to a shrinking
band, floors every prediction denominator at C, and adds Laplace noise
calibrated to the per-iteration sensitivity to the gradient rows the batch
touched. The same loop without clamping, flooring and noise trains the
non-private model.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from ..config import DpSgdConfig, PnbmConfig
from ..utils.seeding import SeedStreams
from .core import RatingDataset, SimilarityMatrix, data_gradient, train_rmse
from .errors import ConfigurationError, TrainingError


logger = logging.getLogger(__name__)


def max_residual(t: int, phi: float) -> float:
    """Residual band half-width e_max(t) = 0.5 + (phi - 1) / (t + 1)."""
    return 0.5 + (phi - 1.0) / (t + 1.0)


def clamp_error(e: float, t: int, phi: float) -> float:
    """Clamp a residual into [-e_max(t), e_max(t)]."""
    if t < 1:
        raise ValueError(f"iteration index must be >= 1, got {t}")
    bound = max_residual(t, phi)
    return min(max(e, -bound), bound)


def sensitivity(t: int, phi: float, C: float) -> float:
    """Per-iteration sensitivity 2 * e_max(t) * phi / C."""
    if C <= 0:
        raise ValueError(f"denominator floor C must be positive, got {C}")
    return 2.0 * max_residual(t, phi) * phi / C


def sample_laplace(
    scale: float,
    shape: Union[int, Tuple[int, ...]],
    rng: Union[int, np.random.Generator],
) -> np.ndarray:
    """I.i.d. Laplace(0, scale) draws by inverting the CDF of a uniform.

    ``x = -b * sign(u) * ln(1 - 2|u|)`` with ``u ~ Uniform(-1/2, 1/2)``. A
    zero scale returns exact zeros.
    """
    if scale < 0:
        raise ValueError(f"Laplace scale must be non-negative, got {scale}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    u = rng.uniform(-0.5, 0.5, size=shape)
    if scale == 0:
        return np.zeros(np.shape(u))
    # u = -0.5 exactly would give log(0)
    magnitude = np.minimum(np.abs(u), np.nextafter(0.5, 0.0))
    return -scale * np.sign(u) * np.log1p(-2.0 * magnitude)


@dataclass
class LedgerEntry:
    iteration: int
    sensitivity: float
    noise_scale: float
    train_rmse: Optional[float] = None


@dataclass
class PrivacyAccount:
    """Budget bookkeeping of one DPSGD run.

    The per-iteration budget is epsilon / (K * gamma); the Laplace scale at
    iteration t is gamma * K * sensitivity(t) / epsilon.
    """

    epsilon: float
    iterations: int
    gamma: float
    phi: float
    denominator_floor: float
    ledger: List[LedgerEntry] = field(default_factory=list)

    @property
    def per_iteration_epsilon(self) -> float:
        return self.epsilon / (self.iterations * self.gamma)

    def noise_scale(self, sensitivity_t: float) -> float:
        return self.gamma * self.iterations * sensitivity_t / self.epsilon

    @property
    def sensitivity(self) -> Optional[float]:
        """Sensitivity of the last completed iteration."""
        return self.ledger[-1].sensitivity if self.ledger else None

    @property
    def current_noise_scale(self) -> Optional[float]:
        return self.ledger[-1].noise_scale if self.ledger else None

    def record(self, t: int, rmse: Optional[float] = None) -> LedgerEntry:
        delta = sensitivity(t, self.phi, self.denominator_floor)
        entry = LedgerEntry(t, delta, self.noise_scale(delta), rmse)
        self.ledger.append(entry)
        return entry

    def composed_epsilon(self) -> float:
        """Sum over completed iterations of the amplified per-iteration budget."""
        return sum(self.per_iteration_epsilon * self.gamma for _ in self.ledger)

    def statement(self) -> str:
        return (
            f"{self.epsilon:g}-differential privacy at rating level: {self.iterations} iterations, "
            f"each {self.per_iteration_epsilon:g}-DP on its mini-batch, amplified by sampling "
            f"ratio gamma={self.gamma:g} and composed over K"
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "gamma": self.gamma,
            "phi": self.phi,
            "denominator_floor": self.denominator_floor,
            "per_iteration_epsilon": self.per_iteration_epsilon,
            "composed_epsilon": self.composed_epsilon(),
            "granularity": "rating",
            "statement": self.statement(),
            "ledger": [asdict(entry) for entry in self.ledger],
        }


NoiseFn = Callable[[int, int, np.random.Generator], np.ndarray]


def _sgd_loop(
    data: RatingDataset,
    S: SimilarityMatrix,
    iterations: int,
    learning_rate: float,
    regularization: float,
    rescale: float,
    batch_size: int,
    streams: SeedStreams,
    residual_bound: Optional[Callable[[int], float]] = None,
    denominator_floor: float = 0.0,
    noise: Optional[NoiseFn] = None,
    on_iteration: Optional[Callable[[int, SimilarityMatrix], None]] = None,
) -> SimilarityMatrix:
    batch_rng = streams.generator("batch")
    noise_rng = streams.generator("noise")
    values = S.values

    for t in range(1, iterations + 1):
        batch = batch_rng.choice(data.n_ratings, size=batch_size, replace=False)
        bound = residual_bound(t) if residual_bound is not None else None
        step = data_gradient(S, data, batch, residual_bound=bound, denominator_floor=denominator_floor)
        if bound is not None:
            assert np.all(np.abs(step.used_residuals) <= bound), "clamped residual outside band"

        grad = step.matrix
        if noise is not None:
            grad[step.rows] += noise(t, len(step.rows), noise_rng)
        np.fill_diagonal(grad, 0.0)

        values -= learning_rate * (rescale * grad + regularization * values)
        if not np.all(np.isfinite(values)):
            raise TrainingError("similarity matrix became non-finite", iteration=t)

        logger.debug(
            f"iteration {t}: batch={batch_size}, rows touched={len(step.rows)}, "
            f"mean |e|={np.mean(np.abs(step.residuals)):.4f}"
        )
        if on_iteration is not None:
            on_iteration(t, S)
    return S


def _check_batch(batch_size: int, data: RatingDataset) -> None:
    if batch_size > data.n_ratings:
        raise ConfigurationError(
            f"batch size {batch_size} exceeds the number of training ratings {data.n_ratings}"
        )


def train_dpsgd(
    data: RatingDataset,
    cfg: DpSgdConfig,
    S_init: SimilarityMatrix,
    add_noise: bool = True,
    track_rmse: bool = True,
) -> Tuple[SimilarityMatrix, PrivacyAccount]:
    """Train the similarity matrix with rating-level differential privacy.

    ``add_noise=False`` keeps the schedule, clamping and flooring but skips
    the Laplace draws (the ledger still records the nominal scale).
    """
    _check_batch(cfg.batch_size, data)
    S_init.check_bound(data)
    if not S_init.is_finite():
        raise TrainingError("initial similarity matrix is not finite")

    phi = data.phi
    account = PrivacyAccount(
        epsilon=cfg.epsilon,
        iterations=cfg.iterations,
        gamma=cfg.batch_size / data.n_ratings,
        phi=phi,
        denominator_floor=cfg.denominator_floor,
    )
    S = SimilarityMatrix(S_init.values * cfg.rescale, beta=cfg.rescale)

    def laplace_rows(t: int, n_rows: int, rng: np.random.Generator) -> np.ndarray:
        scale = account.noise_scale(sensitivity(t, phi, cfg.denominator_floor))
        return sample_laplace(scale, (n_rows, data.n_items), rng)

    def record(t: int, current: SimilarityMatrix) -> None:
        rmse = train_rmse(current, data) if track_rmse else None
        entry = account.record(t, rmse)
        logger.debug(f"ledger t={t}: sensitivity={entry.sensitivity:.5f}, noise scale={entry.noise_scale:.5f}")

    logger.info(
        f"Training DPSGD: epsilon={cfg.epsilon}, K={cfg.iterations}, L={cfg.batch_size}, "
        f"gamma={account.gamma:.5f}, per-iteration epsilon={account.per_iteration_epsilon:.4f}"
    )
    started = time.perf_counter()
    _sgd_loop(
        data,
        S,
        iterations=cfg.iterations,
        learning_rate=cfg.learning_rate,
        regularization=cfg.regularization,
        rescale=cfg.rescale,
        batch_size=cfg.batch_size,
        streams=SeedStreams(cfg.seed),
        residual_bound=lambda t: max_residual(t, phi),
        denominator_floor=cfg.denominator_floor,
        noise=laplace_rows if add_noise else None,
        on_iteration=record,
    )
    logger.info(f"DPSGD finished in {time.perf_counter() - started:.2f}s")
    return S, account


def train_pnbm(
    data: RatingDataset,
    cfg: PnbmConfig,
    S_init: SimilarityMatrix,
    history: Optional[List[float]] = None,
) -> SimilarityMatrix:
    """Non-private MAP training: plain mini-batch SGD on the log-posterior."""
    _check_batch(cfg.batch_size, data)
    S_init.check_bound(data)
    S = SimilarityMatrix(S_init.values * cfg.rescale, beta=cfg.rescale)

    def record(t: int, current: SimilarityMatrix) -> None:
        if history is not None:
            history.append(train_rmse(current, data))

    logger.info(f"Training PNBM: K={cfg.iterations}, L={cfg.batch_size}, eta={cfg.learning_rate}")
    return _sgd_loop(
        data,
        S,
        iterations=cfg.iterations,
        learning_rate=cfg.learning_rate,
        regularization=cfg.regularization,
        rescale=cfg.rescale,
        batch_size=cfg.batch_size,
        streams=SeedStreams(cfg.seed),
        on_iteration=record,
    )
