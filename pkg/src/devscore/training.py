"""End-to-end score training: stratified batches, fresh prior stats, Adam.

Each iteration draws half the batch from the labeled anomalies and half
from the normal pool (both with replacement, so ten labeled anomalies are
enough), resamples the Gaussian reference scores, and takes one Adam step
with decoupled weight decay.  A non-finite loss or gradient aborts with the
last parameters that were still healthy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backprop, stack
from .bags import Bag, check_dims
from .errors import ConfigError, NumericError, TrainingDiverged
from .losses import MilConfig, focal_loss, topk_score, batch_deviation_loss
from .metrics import auc_roc
from .network import (DEFAULT_HIDDEN, NetworkParams, init_params, make_leaves,
                      score_matrix, scores_tensor)
from .prior import PriorConfig, reference_stats, sample_reference_scores

Array = np.ndarray

LOSS_KINDS = ("deviation", "focal")


@dataclass
class TrainConfig:
    """Everything one run needs; mirrors the CLI flags one to one."""
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    epochs: int = 50
    iters_per_epoch: int = 20
    batch_size: int = 48
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "deviation"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    mil: MilConfig = field(default_factory=MilConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and iters_per_epoch >= 1")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.lr <= 0.0 or self.weight_decay < 0.0 or self.eps <= 0.0:
            raise ConfigError("need lr > 0, weight_decay >= 0, eps > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")


@dataclass
class TrainHistory:
    """Per-iteration losses, optional per-epoch AUC, and the end state."""
    losses: list[float] = field(default_factory=list)
    epoch_auc: list[float] = field(default_factory=list)
    final_params: NetworkParams | None = None


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: NetworkParams, grads: dict[str, Array], state: AdamState,
              cfg: TrainConfig) -> tuple[NetworkParams, AdamState]:
    """One Adam update in place; weight decay shrinks params before the step."""
    for name in params.names:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"gradient for {name!r} is not finite")
    state.step += 1
    t = state.step
    for name in params.names:
        p = params.arrays[name]
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        if cfg.weight_decay:
            p *= 1.0 - cfg.lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params, state


def stratified_batch(x_n: list[Bag], x_a: list[Bag], batch_size: int,
                     rng: np.random.Generator) -> list[Bag]:
    """Half labeled anomalies, half normals, both drawn with replacement."""
    if not x_a:
        raise ConfigError("no labeled anomalies: supply at least one anomaly bag")
    if not x_n:
        raise ConfigError("normal pool is empty")
    if batch_size < 2 or batch_size % 2 != 0:
        raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    half = batch_size // 2
    picked_a = rng.integers(0, len(x_a), size=half)
    picked_n = rng.integers(0, len(x_n), size=half)
    return [x_a[i] for i in picked_a] + [x_n[i] for i in picked_n]


def _batch_step(params: NetworkParams, batch: list[Bag], ref, cfg: TrainConfig):
    """Forward the whole batch as one matrix, reduce to a scalar loss Tensor."""
    arch = params.arch
    x = np.concatenate([b.instances for b in batch])
    leaves = make_leaves(params)
    x_leaf = Tensor(x, name="input")
    scores = scores_tensor(leaves, arch, x_leaf)
    phis = []
    offset = 0
    for b in batch:
        sub = scores.gather(np.arange(offset, offset + b.n_instances))
        phi, _ = topk_score(sub, cfg.mil.k_fraction)
        phis.append(phi)
        offset += b.n_instances
    labels = [b.y for b in batch]
    if cfg.loss == "deviation":
        loss, _ = batch_deviation_loss(phis, labels, ref, cfg.mil.margin)
    else:
        terms = [focal_loss(p, y, cfg.focal_gamma, cfg.focal_alpha)
                 for p, y in zip(phis, labels)]
        loss = stack(terms).mean()
    return loss, leaves


def eval_auc(params: NetworkParams, bags: list[Bag], k_fraction: float) -> float:
    """AUC of top-K bag scores against bag labels, plain inference path."""
    scores = bag_scores(params, bags, k_fraction)
    return auc_roc(scores, np.array([b.y for b in bags]))


def bag_scores(params: NetworkParams, bags: list[Bag], k_fraction: float) -> Array:
    """Top-K aggregated score per bag, batched over all instances."""
    x = np.concatenate([b.instances for b in bags])
    flat = score_matrix(params, x)
    out = np.empty(len(bags))
    offset = 0
    for i, b in enumerate(bags):
        phi, _ = topk_score(flat[offset:offset + b.n_instances], k_fraction)
        out[i] = phi
        offset += b.n_instances
    return out


def train(x_n: list[Bag], x_a: list[Bag], cfg: TrainConfig,
          eval_bags: list[Bag] | None = None) -> tuple[NetworkParams, TrainHistory]:
    """Run the full schedule and return final parameters plus history.

    `eval_bags`, when given, is scored after every epoch and the AUC recorded.
    Raises TrainingDiverged (carrying the last good parameters) if the loss
    or any gradient goes non-finite.
    """
    dim = check_dims(x_n + x_a)
    if any(b.y != 0 for b in x_n) or any(b.y != 1 for b in x_a):
        raise ConfigError("x_n must be labeled 0 and x_a labeled 1")
    params = init_params((dim,) + tuple(cfg.hidden), cfg.seed)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    prior_rng = np.random.default_rng([cfg.seed, 2])
    state = AdamState()
    history = TrainHistory()
    last_good = params.copy()
    for _ in range(cfg.epochs):
        for _ in range(cfg.iters_per_epoch):
            batch = stratified_batch(x_n, x_a, cfg.batch_size, batch_rng)
            ref = reference_stats(sample_reference_scores(cfg.prior, prior_rng))
            loss, leaves = _batch_step(params, batch, ref, cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at iteration {len(history.losses)}",
                                       last_good=last_good, history=history)
            backprop(loss)
            grads = {name: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                     for name, leaf in leaves.items()}
            try:
                adam_step(params, grads, state, cfg)
            except NumericError as err:
                raise TrainingDiverged(f"{err} at iteration {len(history.losses)}",
                                       last_good=last_good, history=history) from err
            history.losses.append(value)
            last_good = params.copy()
        if eval_bags:
            history.epoch_auc.append(eval_auc(params, eval_bags, cfg.mil.k_fraction))
    history.final_params = params
    return params, history
