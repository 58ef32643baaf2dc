"""
Configuration management for dpnb.

This module holds the hyper-parameter bundles of every model and the run
configuration driving the command line, plus loading, saving and validation
helpers. Run configurations are JSON or TOML documents; unknown keys are
rejected.
"""

import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


logger = logging.getLogger(__name__)

PRIVATE_MODELS = ("dpsgd-pnbm", "dpps-pnbm")
BASELINE_MODELS = ("pcc", "cos")
MODEL_NAMES = PRIVATE_MODELS + ("pnbm",) + BASELINE_MODELS

# correlation baselines' neighbor cap per MovieLens release
BASELINE_NEIGHBOR_CAPS = {"ml100k": 900, "ml1m": 1300}


class StrictModel(BaseModel):
    """Base for all configuration models: unknown keys are an error."""

    model_config = ConfigDict(extra="forbid")


class DpSgdConfig(StrictModel):
    """Differentially private SGD hyper-parameters."""

    epsilon: float = Field(default=1.0, gt=0, description="Total privacy budget")
    iterations: int = Field(default=10, ge=1, description="Number of iterations K, fixed in advance")
    learning_rate: float = Field(default=0.1, gt=0, description="Learning rate eta")
    regularization: float = Field(default=0.05, ge=0, description="lambda = alpha_S / alpha_R")
    rescale: float = Field(default=10.0, ge=1, description="Similarity rescale factor beta")
    denominator_floor: float = Field(
        default=10.0, gt=0, description="Lower bound C on sum_j |s_ij| I_uj"
    )
    batch_size: int = Field(default=1000, ge=1, description="Mini-batch size L")
    seed: int = Field(default=0, ge=0, description="Seed for batch sampling and noise")
    neighbor_limit: Optional[int] = Field(
        default=500, ge=1, description="Top-N neighbors used when scoring"
    )


class PnbmConfig(StrictModel):
    """Non-private MAP training by plain mini-batch SGD."""

    iterations: int = Field(default=10, ge=1, description="Number of iterations")
    learning_rate: float = Field(default=0.1, gt=0, description="Learning rate eta")
    regularization: float = Field(default=0.05, ge=0, description="lambda = alpha_S / alpha_R")
    rescale: float = Field(default=10.0, ge=1, description="Similarity rescale factor beta")
    batch_size: int = Field(default=1000, ge=1, description="Mini-batch size L")
    seed: int = Field(default=0, ge=0, description="Seed for batch sampling")
    neighbor_limit: Optional[int] = Field(default=500, ge=1, description="Top-N neighbors used when scoring")


class DppsConfig(StrictModel):
    """Differentially private posterior sampling (SGLD) hyper-parameters."""

    epsilon: float = Field(default=20.0, gt=0, description="Total privacy budget (user level)")
    log_likelihood_bound: Optional[float] = Field(
        default=None, gt=0, description="Bound B; derived as phi^2 * tau when omitted"
    )
    initial_step: float = Field(default=8e-6, gt=0, description="Initial step size eta_1")
    decay: float = Field(default=0.3, ge=0.3, le=1.0, description="Step size decay exponent xi")
    temperature: float = Field(default=0.006, gt=0, lt=1, description="Temperature rho")
    regularization: float = Field(default=0.02, ge=0, description="lambda = alpha_S / alpha_R")
    iterations: int = Field(default=2000, ge=1, description="Total iterations K including burn-in")
    burn_in: int = Field(default=500, ge=0, description="Iterations discarded before sampling")
    thinning: int = Field(default=10, ge=1, description="Keep every n-th post burn-in sample")
    batch_size: int = Field(default=1000, ge=1, description="Mini-batch size L (with replacement)")
    inclusion: Literal["printed", "exact"] = Field(
        default="printed", description="Pair inclusion probabilities used to debias the prior"
    )
    average_samples: bool = Field(
        default=False, description="Average predictions over retained samples (non-private analysis)"
    )
    seed: int = Field(default=0, ge=0, description="Seed for batch sampling and noise")
    neighbor_limit: Optional[int] = Field(default=500, ge=1, description="Top-N neighbors used when scoring")

    @model_validator(mode="after")
    def _check_schedule(self) -> "DppsConfig":
        if self.burn_in >= self.iterations:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than iterations ({self.iterations})")
        if self.temperature * self.initial_step >= 1:
            raise ValueError("temperature * initial_step must be < 1 so that noise dominates the step")
        return self


class BaselineConfig(StrictModel):
    """Correlation-based neighborhood model."""

    neighbor_limit: Optional[int] = Field(
        default=BASELINE_NEIGHBOR_CAPS["ml100k"],
        ge=1,
        description="Neighbor cap N_k; follows dataset.format unless set explicitly",
    )


class DatasetConfig(StrictModel):
    """Where the ratings come from and how they are preprocessed."""

    format: Literal["ml100k", "ml1m", "cache"] = Field(default="ml100k", description="Input format")
    path: Path = Field(description="Ratings file, or dataset cache directory for 'cache'")
    min_ratings: int = Field(default=20, ge=1, description="Drop users with fewer ratings")
    tau: int = Field(default=200, ge=1, description="Cap on ratings per user")

    @model_validator(mode="after")
    def _check_tau(self) -> "DatasetConfig":
        if self.tau < self.min_ratings:
            raise ValueError(f"tau ({self.tau}) must be at least min_ratings ({self.min_ratings})")
        return self


class ModelConfig(StrictModel):
    """Model name plus the hyper-parameter block matching it."""

    name: Literal["dpsgd-pnbm", "dpps-pnbm", "pnbm", "pcc", "cos"]
    dpsgd: DpSgdConfig = Field(default_factory=DpSgdConfig)
    dpps: DppsConfig = Field(default_factory=DppsConfig)
    pnbm: PnbmConfig = Field(default_factory=PnbmConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)

    @property
    def is_private(self) -> bool:
        return self.name in PRIVATE_MODELS

    def with_epsilon(self, epsilon: float) -> "ModelConfig":
        """Copy with the privacy budget of the active block replaced."""
        if self.name == "dpsgd-pnbm":
            return self.model_copy(update={"dpsgd": self.dpsgd.model_copy(update={"epsilon": epsilon})})
        if self.name == "dpps-pnbm":
            return self.model_copy(update={"dpps": self.dpps.model_copy(update={"epsilon": epsilon})})
        raise ValueError(f"model '{self.name}' has no privacy parameter")

    def with_seed(self, seed: int) -> "ModelConfig":
        update: Dict[str, Any] = {}
        for block in ("dpsgd", "dpps", "pnbm"):
            update[block] = getattr(self, block).model_copy(update={"seed": seed})
        return self.model_copy(update=update)

    @property
    def epsilon(self) -> Optional[float]:
        if self.name == "dpsgd-pnbm":
            return self.dpsgd.epsilon
        if self.name == "dpps-pnbm":
            return self.dpps.epsilon
        return None

    @property
    def neighbor_limit(self) -> Optional[int]:
        block = {
            "dpsgd-pnbm": self.dpsgd,
            "dpps-pnbm": self.dpps,
            "pnbm": self.pnbm,
        }.get(self.name, self.baseline)
        return block.neighbor_limit


class CvConfig(StrictModel):
    """Cross-validation layout."""

    k: int = Field(default=5, ge=2, description="Fold count")
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], description="Root seeds")
    neighbor_limits: List[int] = Field(
        default_factory=list, description="Top-N truncations to score; empty uses the model's own limit"
    )

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError("at least one seed is required")
        if any(s < 0 for s in seeds):
            raise ValueError("seeds must be non-negative")
        return seeds

    @field_validator("neighbor_limits")
    @classmethod
    def _check_limits(cls, limits: List[int]) -> List[int]:
        if any(n < 1 for n in limits):
            raise ValueError("neighbor limits must be positive")
        return limits


class SweepConfig(StrictModel):
    """Grid for privacy and neighborhood-size sweeps."""

    models: List[str] = Field(description="Models to sweep")
    epsilons: List[float] = Field(default_factory=list, description="Budgets for DPSGD")
    epsilon_per_rating: List[float] = Field(
        default_factory=list, description="Average per-rating budgets x for DPPS (epsilon = x * tau)"
    )
    neighbor_limits: List[int] = Field(default_factory=list, description="Top-N truncations")

    @field_validator("models")
    @classmethod
    def _check_models(cls, models: List[str]) -> List[str]:
        if not models:
            raise ValueError("the sweep needs at least one model")
        unknown = [m for m in models if m not in MODEL_NAMES]
        if unknown:
            raise ValueError(f"unknown models {unknown}, expected a subset of {list(MODEL_NAMES)}")
        return models

    @field_validator("epsilons", "epsilon_per_rating")
    @classmethod
    def _check_positive(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("privacy budgets must be positive")
        return values


class OutputConfig(StrictModel):
    directory: Path = Field(default=Path("runs"), description="Parent directory of run directories")
    record_timing: bool = Field(
        default=False, description="Write measured wall times into results.csv (breaks byte-identical reruns)"
    )


class RunConfig(StrictModel):
    """Main configuration model of one experiment run."""

    dataset: DatasetConfig
    model: ModelConfig = Field(default_factory=lambda: ModelConfig(name="dpsgd-pnbm"))
    privacy: Union[float, Literal["off"]] = Field(
        default="off", description="Overrides the model's epsilon; 'off' keeps the block value"
    )
    cv: CvConfig = Field(default_factory=CvConfig)
    sweep: Optional[SweepConfig] = Field(default=None, description="Optional sweep grid")
    output: OutputConfig = Field(default_factory=OutputConfig)
    threads: Optional[int] = Field(default=None, ge=1, description="Parallel workers")
    debug: bool = Field(default=False, description="Enable debug logging")

    @model_validator(mode="after")
    def _check_privacy(self) -> "RunConfig":
        if self.privacy != "off":
            if not self.model.is_private:
                raise ValueError(f"model '{self.model.name}' has no privacy parameter")
            if self.privacy <= 0:
                raise ValueError("privacy budget must be positive")
        return self

    @model_validator(mode="after")
    def _default_baseline_cap(self) -> "RunConfig":
        baseline = self.model.baseline
        cap = BASELINE_NEIGHBOR_CAPS.get(self.dataset.format)
        if cap is not None and "neighbor_limit" not in baseline.model_fields_set:
            self.model = self.model.model_copy(
                update={"baseline": baseline.model_copy(update={"neighbor_limit": cap})}
            )
        return self

    @model_validator(mode="after")
    def _check_averaged_sweep(self) -> "RunConfig":
        sweep = self.sweep
        if sweep is None or "dpps-pnbm" not in sweep.models or not self.model.dpps.average_samples:
            return self
        if sweep.epsilons or sweep.epsilon_per_rating:
            raise ValueError(
                "dpps average_samples scores without a privacy budget; "
                "it cannot be combined with a DPPS budget sweep"
            )
        return self

    def effective_model(self) -> ModelConfig:
        """Model block with the top-level privacy override applied."""
        if self.privacy == "off":
            return self.model
        return self.model.with_epsilon(float(self.privacy))

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json", exclude={"threads", "debug"}), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def read_config_document(path: Path) -> Dict[str, Any]:
    """Read a JSON or TOML configuration document into a dictionary."""
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as f:
            return tomllib.load(f)
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load and validate a run configuration, applying dotted-key overrides."""
    config = validate_config(apply_overrides(read_config_document(path), overrides))
    logger.info(f"Loaded configuration from {path}")
    return config


def apply_overrides(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Set dotted keys (``model.dpsgd.epsilon``) in a configuration document."""
    for key, value in (overrides or {}).items():
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return data


def save_config(config: RunConfig, config_dir: Path) -> Path:
    """Save configuration to ``config.json`` in ``config_dir``."""
    config_file = Path(config_dir) / "config.json"
    try:
        config_file.parent.mkdir(parents=True, exist_ok=True)
        with open(config_file, "w", encoding="utf-8") as f:
            json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
        logger.info(f"Saved configuration to {config_file}")
        return config_file
    except Exception as e:
        logger.error(f"Failed to save config to {config_file}: {e}")
        raise


def validate_config(config_data: Dict[str, Any]) -> RunConfig:
    """Validate configuration data and return a RunConfig."""
    return RunConfig(**config_data)
