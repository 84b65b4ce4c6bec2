"""Ranking metrics, tail probabilities and the open-space risk estimate.

AUC uses the rank-sum form with midranks, so ties count half. The tail
probability converts a score into how unlikely it is under the Gaussian
reference: the chance of landing at least that far from the mean on either
side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ContractError
from .network import NetworkParams, score_matrix
from .prior import PriorConfig

Array = np.ndarray


def _midranks(values: Array) -> Array:
    """1-based ranks; tied values all get the mean of their rank block."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, labels) -> float:
    """Probability a random anomaly outscores a random normal (ties half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores and labels must be matching 1-d arrays, got {s.shape}, {y.shape}")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores contain non-finite values")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ContractError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    ranks = _midranks(s)
    pos_ranks = ranks[np.asarray(y) == 1].sum()
    return float((pos_ranks - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> tuple[Array, Array]:
    """(false positive rate, true positive rate) swept over all score cuts."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    tp = np.concatenate([[0], np.cumsum(y_sorted == 1)])
    fp = np.concatenate([[0], np.cumsum(y_sorted == 0)])
    return fp / max(fp[-1], 1), tp / max(tp[-1], 1)


def f1_sweep(scores, labels, n_thresholds: int = 201) -> list[tuple[float, float, float, float]]:
    """(threshold, precision, recall, f1) rows over a uniform threshold grid.

    A bag is called anomalous when its score is >= the threshold, so the
    lowest threshold predicts everything positive.  Precision at zero
    predictions is reported as 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise ContractError("scores and labels must be matching non-empty 1-d arrays")
    if n_thresholds < 1:
        raise ConfigError(f"need at least one threshold, got {n_thresholds}")
    lo, hi = float(s.min()), float(s.max())
    if lo == hi:
        grid = np.array([lo])
    else:
        grid = np.linspace(lo, hi, n_thresholds)
    n_pos = int(np.sum(y == 1))
    rows = []
    for t in grid:
        pred = s >= t
        tp = int(np.sum(pred & (y == 1)))
        fp = int(np.sum(pred & (y == 0)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / n_pos if n_pos else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        rows.append((float(t), precision, recall, f1))
    return rows


def score_to_probability(score: float, prior: PriorConfig | None = None) -> float:
    """Two-sided tail probability of a score under the Gaussian reference.

    Equals 2 * (1 - Phi(|score - mu| / sigma)); strictly decreasing in the
    distance from the mean, 1.0 exactly at it.
    """
    prior = prior or PriorConfig()
    z = abs(float(score) - prior.mu) / prior.sigma
    return math.erfc(z / math.sqrt(2.0))


@dataclass
class RiskEstimate:
    """Monte-Carlo open-space risk with its ingredients."""
    risk: float
    frac_normal: float
    frac_normal_open: float
    radius: float
    n_samples: int

    def standard_error(self) -> float:
        # binomial error on the numerator, propagated through the ratio
        if self.frac_normal == 0.0:
            return 0.0
        p = self.frac_normal_open
        return math.sqrt(max(p * (1.0 - p), 0.0) / self.n_samples) / self.frac_normal


def estimate_open_space_risk(params: NetworkParams, prior: PriorConfig,
                             train_normals: Array, region: tuple[Array, Array],
                             n_samples: int = 100_000,
                             threshold: float = 1.96,
                             rng: np.random.Generator | None = None,
                             radius: float | None = None) -> RiskEstimate:
    """How much of what the model calls normal lies far from all training normals.

    Open space is the part of `region` farther than `radius` from every
    training normal; the radius defaults to the 95th percentile of
    nearest-neighbor distances inside the normal set.  A point counts as
    "called normal" when its deviation stays below `threshold`.  Risk is
    the normal-and-open fraction over the normal fraction, 0 when nothing
    is called normal.
    """
    x_n = np.asarray(train_normals, dtype=np.float64)
    if x_n.ndim != 2 or x_n.shape[0] < 2:
        raise ContractError(f"need a (n>=2, d) matrix of training normals, got {x_n.shape}")
    lo = np.asarray(region[0], dtype=np.float64)
    hi = np.asarray(region[1], dtype=np.float64)
    if lo.shape != (x_n.shape[1],) or hi.shape != (x_n.shape[1],) or np.any(hi <= lo):
        raise ContractError("region must be a (lo, hi) box matching the data dimension")
    if np.any(x_n < lo) or np.any(x_n > hi):
        raise ContractError("region must contain every training normal")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be positive, got {n_samples}")
    rng = rng or np.random.default_rng(0)

    tree = cKDTree(x_n)
    if radius is None:
        nn_dist, _ = tree.query(x_n, k=2)
        radius = float(np.percentile(nn_dist[:, 1], 95.0))

    samples = rng.uniform(lo, hi, size=(n_samples, x_n.shape[1]))
    devs = (score_matrix(params, samples) - prior.mu) / prior.sigma
    called_normal = devs < threshold
    dist, _ = tree.query(samples, k=1)
    in_open = dist > radius

    frac_normal = float(np.mean(called_normal))
    frac_normal_open = float(np.mean(called_normal & in_open))
    risk = frac_normal_open / frac_normal if frac_normal > 0.0 else 0.0
    return RiskEstimate(risk=risk, frac_normal=frac_normal,
                        frac_normal_open=frac_normal_open,
                        radius=radius, n_samples=n_samples)


@dataclass
class EvalReport:
    """Detection quality on one scored set."""
    auc: float
    f1_curve: list[tuple[float, float, float, float]]
    n_pos: int
    n_neg: int
    pixel_auc: float | None = None
    risk: RiskEstimate | None = None

    @property
    def best_f1(self) -> tuple[float, float]:
        t, _, _, f1 = max(self.f1_curve, key=lambda row: row[3])
        return t, f1


def evaluate(scores, labels, pixel_auc: float | None = None,
             risk: RiskEstimate | None = None,
             n_thresholds: int = 201) -> EvalReport:
    """Bundle AUC and the F1 sweep (plus optional extras) into one report."""
    y = np.asarray(labels)
    return EvalReport(auc=auc_roc(scores, labels),
                      f1_curve=f1_sweep(scores, labels, n_thresholds),
                      n_pos=int(np.sum(y == 1)), n_neg=int(np.sum(y == 0)),
                      pixel_auc=pixel_auc, risk=risk)


def auc_f1_curve(scores, labels, pixel_aucs) -> list[tuple[float, float, float]]:
    """(threshold, detection f1, mean pixel AUC over detected true positives).

    `pixel_aucs` aligns with `scores`; entries for normal bags are ignored.
    Thresholds reuse the F1 sweep grid.  Rows where nothing is detected
    report pixel AUC as nan.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pa = np.asarray(pixel_aucs, dtype=np.float64)
    if not (s.shape == y.shape == pa.shape):
        raise ContractError("scores, labels and pixel_aucs must align")
    rows = []
    for t, _, _, f1 in f1_sweep(s, y):
        hit = (s >= t) & (y == 1) & np.isfinite(pa)
        mean_pa = float(pa[hit].mean()) if np.any(hit) else float("nan")
        rows.append((t, f1, mean_pa))
    return rows
