"""Optimizer, batch sampling, and the full training loop."""

import numpy as np
import pytest

from devscore.bags import Bag
from devscore.data import SplitSpec, TabularGenConfig, gen_tabular, make_split
from devscore.errors import ConfigError, NumericError, TrainingDiverged
from devscore.network import init_params
from devscore.training import (AdamState, TrainConfig, adam_step, bag_scores,
                               eval_auc, stratified_batch, train)


def small_cfg(**kw):
    base = dict(hidden=(8, 4), epochs=2, iters_per_epoch=5, batch_size=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def separable_2d(seed=0):
    cfg = TabularGenConfig(n_normal=400, dim=2,
                           normal_components=(((0.0, 0.0), 1.0),),
                           anomaly_classes=((40, (5.0, 5.0), 1.0),), seed=seed)
    return make_split(gen_tabular(cfg), SplitSpec(n_labeled=10, seed=seed))


# ---- adam ------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    params = init_params((3, 4), seed=0)
    before = params.copy()
    grads = {n: np.zeros_like(a) for n, a in params.arrays.items()}
    adam_step(params, grads, AdamState(), small_cfg(weight_decay=0.0))
    assert params.allclose(before)


def test_adam_first_step_magnitude_is_lr_signed():
    cfg = small_cfg(lr=1e-3, weight_decay=0.0)
    params = init_params((3, 4), seed=1)
    before = params.copy()
    rng = np.random.default_rng(0)
    grads = {n: rng.normal(size=a.shape) + np.sign(rng.normal(size=a.shape)) * 0.5
             for n, a in params.arrays.items()}
    adam_step(params, grads, AdamState(), cfg)
    for name in params.names:
        delta = params.arrays[name] - before.arrays[name]
        # bias-corrected first step is -lr * g / (|g| + eps) = -lr * sign(g)
        assert np.allclose(delta, -cfg.lr * np.sign(grads[name]), atol=cfg.lr * 1e-2)


def test_adam_weight_decay_shrinks_before_update():
    cfg = small_cfg(lr=0.1, weight_decay=0.5)
    params = init_params((2, 2), seed=2)
    before = params.copy()
    grads = {n: np.zeros_like(a) for n, a in params.arrays.items()}
    adam_step(params, grads, AdamState(), cfg)
    for name in params.names:
        assert np.allclose(params.arrays[name],
                           before.arrays[name] * (1.0 - 0.1 * 0.5), atol=1e-15)


def test_adam_rejects_nonfinite_gradient_naming_block():
    params = init_params((3, 4), seed=0)
    grads = {n: np.zeros_like(a) for n, a in params.arrays.items()}
    grads["w0"][0, 0] = np.nan
    with pytest.raises(NumericError, match="w0"):
        adam_step(params, grads, AdamState(), small_cfg())


def test_adam_quadratic_bowl_matches_scalar_simulation():
    # independent float-by-float simulation of the same recurrence
    cfg = small_cfg(lr=0.005, weight_decay=0.0)
    params = init_params((4, 3), seed=3)
    w00 = float(params.arrays["w0"][0, 0])
    m = v = 0.0
    sim = w00
    state = AdamState()
    norms = []
    for t in range(1, 101):
        g = sim
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        sim -= cfg.lr * (m / (1 - cfg.beta1 ** t)) / (
            np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
        grads = {n: a.copy() for n, a in params.arrays.items()}  # grad of 0.5||p||^2
        adam_step(params, grads, state, cfg)
        norms.append(float(sum(np.sum(a * a) for a in params.arrays.values())))
        assert params.arrays["w0"][0, 0] == pytest.approx(sim, rel=1e-12)
    # small enough steps: no coordinate overshoots zero, norm keeps falling
    assert all(b < a for a, b in zip(norms, norms[1:]))


# ---- batching ----------------------------------------------------------------


def _unit_bags(n, y, tag):
    return [Bag(id=f"{tag}{i}", instances=np.array([[float(i), float(y)]]), y=y)
            for i in range(n)]


def test_stratified_counts_are_half_and_half():
    x_n, x_a = _unit_bags(50, 0, "n"), _unit_bags(10, 1, "a")
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = stratified_batch(x_n, x_a, 16, rng)
        labels = [b.y for b in batch]
        assert len(batch) == 16
        assert sum(labels) == 8 and len(labels) - sum(labels) == 8


def test_stratified_single_anomaly_repeats():
    x_n, x_a = _unit_bags(5, 0, "n"), _unit_bags(1, 1, "a")
    batch = stratified_batch(x_n, x_a, 6, np.random.default_rng(1))
    anomalies = [b for b in batch if b.y == 1]
    assert len(anomalies) == 3
    assert all(b.id == "a0" for b in anomalies)


def test_stratified_empty_anomalies_is_config_error():
    with pytest.raises(ConfigError, match="anomal"):
        stratified_batch(_unit_bags(5, 0, "n"), [], 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        stratified_batch([], _unit_bags(5, 1, "a"), 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        stratified_batch(_unit_bags(5, 0, "n"), _unit_bags(5, 1, "a"), 5,
                         np.random.default_rng(0))


def test_stratified_frequencies_binomial_bound():
    x_n, x_a = _unit_bags(30, 0, "n"), _unit_bags(10, 1, "a")
    rng = np.random.default_rng(2)
    counts = {b.id: 0 for b in x_a}
    n_batches, half = 1000, 8
    for _ in range(n_batches):
        for b in stratified_batch(x_n, x_a, 2 * half, rng):
            if b.y == 1:
                counts[b.id] += 1
    draws = n_batches * half
    p = 1.0 / len(x_a)
    sd = np.sqrt(draws * p * (1.0 - p))
    for c in counts.values():
        assert abs(c - draws * p) <= 3.0 * sd


# ---- train loop ----------------------------------------------------------------


def test_zero_epochs_returns_fresh_init():
    split = separable_2d()
    cfg = small_cfg(epochs=0)
    params, history = train(split.x_n, split.x_a, cfg)
    assert params.allclose(init_params((2, 8, 4), cfg.seed))
    assert history.losses == [] and history.final_params is params


def test_fixed_seed_reproduces_history_bitwise():
    split = separable_2d()
    a_params, a_hist = train(split.x_n, split.x_a, small_cfg())
    b_params, b_hist = train(split.x_n, split.x_a, small_cfg())
    assert a_hist.losses == b_hist.losses
    assert a_params.allclose(b_params)
    for name in a_params.names:
        assert a_params.arrays[name].tobytes() == b_params.arrays[name].tobytes()


def test_history_lengths_match_schedule():
    split = separable_2d()
    cfg = small_cfg(epochs=3, iters_per_epoch=4)
    _, history = train(split.x_n, split.x_a, cfg, eval_bags=split.test)
    assert len(history.losses) == 12
    assert len(history.epoch_auc) == 3
    assert all(0.0 <= a <= 1.0 for a in history.epoch_auc)


def test_separable_set_beats_095_like_logistic_oracle():
    from sklearn.linear_model import LogisticRegression

    split = separable_2d()
    cfg = TrainConfig(hidden=(16, 8), epochs=15, iters_per_epoch=10,
                      batch_size=16, seed=0)
    params, _ = train(split.x_n, split.x_a, cfg)
    auc = eval_auc(params, split.test, cfg.mil.k_fraction)
    assert auc >= 0.95

    x_train = np.concatenate([b.instances for b in split.x_n + split.x_a])
    y_train = np.array([0] * len(split.x_n) + [1] * len(split.x_a))
    probe = LogisticRegression(max_iter=2000).fit(x_train, y_train)
    x_test = np.concatenate([b.instances for b in split.test])
    y_test = np.array([b.y for b in split.test])
    from devscore.metrics import auc_roc
    oracle_auc = auc_roc(probe.decision_function(x_test), y_test)
    assert oracle_auc >= 0.95  # the set really is separable


def test_deviations_land_in_contract_bands():
    split = separable_2d()
    cfg = TrainConfig(hidden=(16, 8), epochs=15, iters_per_epoch=10,
                      batch_size=16, seed=0)
    params, _ = train(split.x_n, split.x_a, cfg)
    devs = bag_scores(params, split.test, cfg.mil.k_fraction)
    labels = np.array([b.y for b in split.test])
    assert -1.5 <= devs[labels == 0].mean() <= 1.5
    assert devs[labels == 1].mean() >= cfg.mil.margin / 2.0


def test_epoch_mean_loss_decreases_first_to_last():
    split = separable_2d()
    cfg = TrainConfig(hidden=(16, 8), epochs=10, iters_per_epoch=10,
                      batch_size=16, seed=0)
    _, history = train(split.x_n, split.x_a, cfg)
    first = np.mean(history.losses[:cfg.iters_per_epoch])
    last = np.mean(history.losses[-cfg.iters_per_epoch:])
    assert last <= first


def test_degenerate_single_anomaly_stays_finite():
    split = separable_2d()
    lone = split.x_a[0]
    params, history = train(split.x_n, [lone], small_cfg(epochs=3))
    assert all(np.isfinite(history.losses))
    assert all(np.all(np.isfinite(a)) for a in params.arrays.values())


def test_focal_loss_route_trains():
    split = separable_2d()
    params, history = train(split.x_n, split.x_a, small_cfg(loss="focal"))
    assert len(history.losses) == 10
    assert all(np.isfinite(history.losses))
    assert all(l >= 0.0 for l in history.losses)


def test_train_rejects_mislabeled_pools():
    split = separable_2d()
    with pytest.raises(ConfigError):
        train(split.x_a, split.x_a, small_cfg())
    with pytest.raises(ConfigError):
        train(split.x_n, split.x_n, small_cfg())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=7)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)


def test_divergence_carries_last_good_params():
    huge_n = [Bag(id=f"hn{i}", instances=np.full((1, 2), 1e308), y=0)
              for i in range(4)]
    huge_a = [Bag(id=f"ha{i}", instances=np.full((1, 2), -1e308), y=1)
              for i in range(2)]
    cfg = TrainConfig(hidden=(4, 3), epochs=1, iters_per_epoch=1,
                      batch_size=4, seed=0)
    with pytest.raises(TrainingDiverged) as info, np.errstate(over="ignore"):
        train(huge_n, huge_a, cfg)
    err = info.value
    assert err.last_good is not None
    assert err.last_good.allclose(init_params((2, 4, 3), 0))
    assert err.history is not None and err.history.losses == []
