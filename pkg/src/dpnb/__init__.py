"""
dpnb - differentially private neighborhood-based recommenders.

This package trains item-item similarity matrices for a probabilistic
neighborhood-based collaborative filtering model, either with Laplace-noised
SGD (rating-level privacy) or by stochastic gradient Langevin sampling from
a scaled posterior (user-level privacy), and evaluates them against
correlation baselines.

Key Features:
- Probabilistic neighborhood model with top-N truncated prediction
- DPSGD training with a per-iteration privacy ledger
- Posterior sampling (SGLD) with debiased mini-batch gradients
- Pearson and cosine baselines
- Reproducible k-fold evaluation and privacy/neighbor-size sweeps

Example usage:
    from dpnb.services.ingest import parse_movielens, preprocess
    from dpnb.services.evaluation import run_cv
    from dpnb.config import ModelConfig

    data = preprocess(parse_movielens("u.data"))
    report = run_cv(data, ModelConfig(name="dpsgd-pnbm"), k=5, seeds=[0])

License: MIT
"""

__version__ = "0.1.0"
__license__ = "MIT"

__all__ = ["__version__"]
