"""Gaussian reference scores that anchor what "normal" means.

A fresh sample of reference scores is drawn every training batch; its mean
and standard deviation normalize the learned scores into z-space.  Nothing
differentiates through these statistics - they enter the loss as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

SIGMA_FLOOR = 1e-6


@dataclass
class PriorConfig:
    """Location, scale and draw count of the reference distribution."""
    mu: float = 0.0
    sigma: float = 1.0
    n_draws: int = 5000

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ConfigError(f"prior sigma must be positive, got {self.sigma}")
        if self.n_draws < 2:
            raise ConfigError(f"prior needs at least 2 draws, got {self.n_draws}")


@dataclass
class ReferenceStats:
    """Mean and (floored, population) std of one reference sample."""
    mu_r: float
    sigma_r: float
    n: int


def sample_reference_scores(cfg: PriorConfig, rng: np.random.Generator) -> np.ndarray:
    """One batch of reference scores from the prior."""
    return rng.normal(cfg.mu, cfg.sigma, size=cfg.n_draws)


def reference_stats(scores) -> ReferenceStats:
    """Summarize a reference sample; std is population form, floored at 1e-6."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise ContractError(f"reference sample must be 1-d with >= 2 draws, got shape {scores.shape}")
    mu = float(scores.mean())
    sigma = float(max(scores.std(), SIGMA_FLOOR))
    return ReferenceStats(mu_r=mu, sigma_r=sigma, n=scores.size)
