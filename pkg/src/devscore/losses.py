"""Top-K bag aggregation, deviation loss and the focal-loss baseline.

Every function here is polymorphic over plain floats/arrays and autodiff
Tensors: pass Tensors to get a differentiable graph, plain values to get
plain values.  Gradient routing through the top-K selection gives 1/K to
each selected instance and exactly zero elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, stack
from .errors import ConfigError, ContractError
from .prior import ReferenceStats

LOG_FLOOR = 1e-12


@dataclass
class MilConfig:
    """Aggregation fraction and margin of the deviation hinge."""
    k_fraction: float = 0.10
    margin: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.k_fraction <= 1.0:
            raise ConfigError(f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if not self.margin > 0.0:
            raise ConfigError(f"margin must be positive, got {self.margin}")


@dataclass
class LossValue:
    """A batch loss together with the per-sample deviations behind it."""
    value: float
    deviations: list[float]


def topk_count(n: int, k_fraction: float) -> int:
    if n < 1:
        raise ContractError("bag must contain at least one instance")
    return max(1, math.ceil(k_fraction * n))


def topk_indices(values: np.ndarray, k_fraction: float) -> np.ndarray:
    """Indices of the K largest values, ties broken toward the lowest index."""
    values = np.asarray(values, dtype=np.float64)
    k = topk_count(values.size, k_fraction)
    # stable sort on the negated values keeps the earliest index first on ties
    picked = np.argsort(-values, kind="stable")[:k]
    return np.sort(picked)


def topk_score(instance_scores, k_fraction: float = 0.10):
    """Mean of the K largest instance scores and the selected indices.

    K = max(1, ceil(k_fraction * n)).  Accepts a Tensor (returns a scalar
    Tensor) or any 1-d array-like (returns a float).
    """
    if isinstance(instance_scores, Tensor):
        idx = topk_indices(instance_scores.data, k_fraction)
        return instance_scores.gather(idx).mean(), idx
    values = np.asarray(instance_scores, dtype=np.float64)
    idx = topk_indices(values, k_fraction)
    return float(values[idx].mean()), idx


def deviation(score, ref: ReferenceStats):
    """Z-score of a bag score under the reference statistics."""
    return (score - ref.mu_r) / ref.sigma_r


def deviation_loss(dev, y: int, margin: float = 5.0):
    """|dev| for normals, hinge max(0, margin - dev) for labeled anomalies."""
    if y not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y}")
    if y == 1:
        gap = margin - dev
        return gap.relu() if isinstance(gap, Tensor) else max(0.0, gap)
    return dev.abs() if isinstance(dev, Tensor) else abs(dev)


def focal_loss(score, y: int, gamma: float = 2.0, alpha: float = 0.5):
    """Focal loss on the sigmoid of a bag score; the class-imbalance baseline."""
    if y not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y}")
    if gamma < 0.0 or not 0.0 < alpha < 1.0:
        raise ConfigError(f"need gamma >= 0 and 0 < alpha < 1, got {gamma}, {alpha}")
    if isinstance(score, Tensor):
        p = score.sigmoid()
        p_t = p if y == 1 else 1.0 - p
        a_t = alpha if y == 1 else 1.0 - alpha
        return -a_t * (1.0 - p_t) ** gamma * p_t.log(LOG_FLOOR)
    p = 1.0 / (1.0 + math.exp(-score)) if score >= 0 else math.exp(score) / (1.0 + math.exp(score))
    p_t = p if y == 1 else 1.0 - p
    a_t = alpha if y == 1 else 1.0 - alpha
    return -a_t * (1.0 - p_t) ** gamma * math.log(max(p_t, LOG_FLOOR))


def batch_deviation_loss(bag_scores, labels, ref: ReferenceStats, margin: float = 5.0):
    """Mean deviation loss over a batch of bag scores.

    Returns `(loss, LossValue)` where `loss` matches the input kind (Tensor
    in, Tensor out) and `LossValue` records the realized deviations.
    """
    bag_scores = list(bag_scores)
    labels = list(labels)
    if len(bag_scores) != len(labels) or not bag_scores:
        raise ContractError("batch needs equally many scores and labels, at least one each")
    devs = [deviation(s, ref) for s in bag_scores]
    terms = [deviation_loss(d, y, margin) for d, y in zip(devs, labels)]
    if isinstance(bag_scores[0], Tensor):
        total = stack(terms).mean()
        realized = [float(d.data) for d in devs]
        return total, LossValue(float(total.data), realized)
    total = float(np.mean(terms))
    return total, LossValue(total, [float(d) for d in devs])
