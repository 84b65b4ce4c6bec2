"""Top-K aggregation, deviation loss, and the focal baseline."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devscore.autodiff import Tensor, backprop
from devscore.errors import ConfigError, ContractError
from devscore.losses import (LOG_FLOOR, LossValue, MilConfig,
                             batch_deviation_loss, deviation, deviation_loss,
                             focal_loss, topk_count, topk_indices, topk_score)
from devscore.prior import ReferenceStats

UNIT_REF = ReferenceStats(mu_r=0.0, sigma_r=1.0, n=2)


def brute_force_topk(values: np.ndarray, k: int) -> float:
    """Max over all size-k subsets of the subset mean."""
    return max(float(np.mean(combo))
               for combo in itertools.combinations(values, k))


def test_topk_forced_arithmetic():
    phi, idx = topk_score([5.0, 1.0, 3.0, 2.0], k_fraction=0.5)
    assert phi == 4.0
    assert set(idx) == {0, 2}


def test_topk_fraction_one_is_plain_mean():
    rng = np.random.default_rng(0)
    values = rng.normal(size=17)
    phi, idx = topk_score(values, k_fraction=1.0)
    assert phi == float(values.mean())
    assert np.array_equal(idx, np.arange(17))


def test_topk_single_instance():
    phi, idx = topk_score([2.5], k_fraction=0.1)
    assert phi == 2.5 and list(idx) == [0]


def test_topk_count_ceiling():
    assert topk_count(49, 0.10) == 5
    assert topk_count(10, 0.10) == 1
    assert topk_count(11, 0.10) == 2
    with pytest.raises(ContractError):
        topk_count(0, 0.10)


def test_topk_empty_rejected():
    with pytest.raises(ContractError):
        topk_score([], k_fraction=0.5)


def test_topk_tie_breaks_toward_lowest_index():
    phi, idx = topk_score([1.0, 1.0, 1.0], k_fraction=0.3)
    assert phi == 1.0 and list(idx) == [0]
    assert list(topk_indices(np.array([2.0, 3.0, 3.0, 2.0]), 0.5)) == [1, 2]
    assert list(topk_indices(np.array([7.0, 7.0, 7.0, 7.0]), 0.75)) == [0, 1, 2]


def test_topk_subset_enumeration_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 13))
        values = rng.normal(size=n)
        k_fraction = float(rng.uniform(0.05, 1.0))
        phi, idx = topk_score(values, k_fraction)
        k = topk_count(n, k_fraction)
        assert len(idx) == k
        assert phi == brute_force_topk(values, k)


def test_topk_sort_oracle_large_bag():
    rng = np.random.default_rng(2)
    values = rng.normal(size=50)
    phi, idx = topk_score(values, 0.10)
    top5 = np.sort(values)[-5:]
    assert phi == pytest.approx(float(top5.mean()), abs=1e-15)
    assert np.array_equal(np.sort(values[idx]), top5)


def test_topk_gradient_routing_is_one_over_k():
    rng = np.random.default_rng(3)
    scores = Tensor(rng.normal(size=12))
    phi, idx = topk_score(scores, 0.25)  # K = 3
    backprop(phi)
    expected = np.zeros(12)
    expected[idx] = 1.0 / 3.0
    assert np.array_equal(scores.grad, expected)


def test_topk_gradient_matches_fd_away_from_ties():
    rng = np.random.default_rng(4)
    values = rng.normal(size=8)
    scores = Tensor(values.copy())
    phi, _ = topk_score(scores, 0.3)
    backprop(phi)
    step = 1e-6
    for j in range(8):
        bumped = values.copy()
        bumped[j] += step
        hi, _ = topk_score(bumped, 0.3)
        bumped[j] -= 2 * step
        lo, _ = topk_score(bumped, 0.3)
        fd = (hi - lo) / (2 * step)
        assert scores.grad[j] == pytest.approx(fd, abs=1e-6)


def test_deviation_zero_and_unit_cases():
    ref = ReferenceStats(mu_r=1.5, sigma_r=2.0, n=9)
    assert deviation(1.5, ref) == 0.0
    assert deviation(5.0, UNIT_REF) == 5.0


@given(alpha=st.floats(min_value=0.01, max_value=100.0),
       beta=st.floats(min_value=-50.0, max_value=50.0),
       score=st.floats(min_value=-100.0, max_value=100.0))
@settings(max_examples=80, deadline=None)
def test_deviation_affine_invariance(alpha, beta, score):
    rng = np.random.default_rng(11)
    draws = rng.normal(size=64)
    base = deviation(score, ReferenceStats(float(draws.mean()), float(draws.std()), 64))
    moved = deviation(alpha * score + beta,
                      ReferenceStats(float((alpha * draws + beta).mean()),
                                     float((alpha * draws + beta).std()), 64))
    assert moved == pytest.approx(base, rel=1e-7, abs=1e-7)


def test_deviation_loss_unit_table():
    assert deviation_loss(0.0, y=0) == 0.0
    assert deviation_loss(5.0, y=1, margin=5.0) == 0.0
    assert deviation_loss(7.3, y=1, margin=5.0) == 0.0
    assert deviation_loss(-1.0, y=1, margin=5.0) == 6.0
    assert deviation_loss(-2.0, y=0) == 2.0


def test_deviation_loss_rejects_bad_label():
    with pytest.raises(ContractError):
        deviation_loss(0.0, y=2)


@given(d1=st.floats(min_value=-50, max_value=50),
       d2=st.floats(min_value=-50, max_value=50))
@settings(max_examples=80, deadline=None)
def test_deviation_loss_monotonicity(d1, d2):
    lo, hi = sorted((d1, d2))
    # normals: non-decreasing in |dev|; anomalies: non-increasing in dev
    if abs(lo) <= abs(hi):
        assert deviation_loss(lo, 0) <= deviation_loss(hi, 0) + 1e-12
    assert deviation_loss(lo, 1) >= deviation_loss(hi, 1) - 1e-12
    for d in (lo, hi):
        assert deviation_loss(d, 0) >= 0.0
        assert deviation_loss(d, 1) >= 0.0


def test_deviation_loss_zero_conditions():
    assert deviation_loss(0.0, 0) == 0.0
    assert deviation_loss(1e-9, 0) > 0.0
    assert deviation_loss(5.0, 1) == 0.0
    assert deviation_loss(4.999, 1) > 0.0


def test_focal_gamma_zero_is_half_bce():
    rng = np.random.default_rng(5)
    for score in rng.normal(scale=3.0, size=20):
        for y in (0, 1):
            p = 1.0 / (1.0 + math.exp(-score))
            bce = -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
            assert focal_loss(float(score), y, gamma=0.0, alpha=0.5) == \
                pytest.approx(0.5 * bce, rel=1e-12)


def test_focal_limit_vanishes_for_confident_positive():
    assert focal_loss(40.0, y=1) == pytest.approx(0.0, abs=1e-15)
    assert focal_loss(-40.0, y=0) == pytest.approx(0.0, abs=1e-15)


def test_focal_formula_oracle_plain_and_tensor():
    rng = np.random.default_rng(6)
    for _ in range(30):
        score = float(rng.normal(scale=4.0))
        y = int(rng.integers(0, 2))
        gamma = float(rng.uniform(0.0, 4.0))
        alpha = float(rng.uniform(0.05, 0.95))
        p = 1.0 / (1.0 + math.exp(-score))
        p_t = p if y == 1 else 1.0 - p
        a_t = alpha if y == 1 else 1.0 - alpha
        expected = -a_t * (1.0 - p_t) ** gamma * math.log(max(p_t, LOG_FLOOR))
        plain = focal_loss(score, y, gamma, alpha)
        tens = focal_loss(Tensor(score), y, gamma, alpha)
        assert plain == pytest.approx(expected, rel=1e-12, abs=1e-15)
        assert float(tens.data) == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_focal_log_clamp_keeps_loss_finite():
    loss = focal_loss(-80.0, y=1, gamma=2.0, alpha=0.5)
    assert math.isfinite(loss)
    assert loss == pytest.approx(-0.5 * math.log(LOG_FLOOR), rel=1e-6)


def test_focal_gradient_matches_fd():
    from devscore.autodiff import grad_check
    for y in (0, 1):
        err = grad_check(lambda t, y=y: focal_loss(t.reshape(()), y), np.array(0.7))
        assert err < 1e-4


def test_focal_validation():
    with pytest.raises(ContractError):
        focal_loss(0.0, y=3)
    with pytest.raises(ConfigError):
        focal_loss(0.0, y=1, gamma=-1.0)
    with pytest.raises(ConfigError):
        focal_loss(0.0, y=1, alpha=1.0)


def test_mil_config_validation():
    with pytest.raises(ConfigError):
        MilConfig(k_fraction=0.0)
    with pytest.raises(ConfigError):
        MilConfig(k_fraction=1.2)
    with pytest.raises(ConfigError):
        MilConfig(margin=0.0)
    assert MilConfig().k_fraction == 0.10
    assert MilConfig().margin == 5.0


def test_batch_loss_means_per_sample_terms():
    scores = [0.0, 5.0, -2.0]
    labels = [0, 1, 0]
    total, value = batch_deviation_loss(scores, labels, UNIT_REF)
    assert total == pytest.approx((0.0 + 0.0 + 2.0) / 3.0)
    assert isinstance(value, LossValue)
    assert value.deviations == [0.0, 5.0, -2.0]
    assert value.value == total


def test_batch_loss_tensor_path_matches_plain():
    rng = np.random.default_rng(7)
    scores = rng.normal(size=6)
    labels = [0, 1, 0, 1, 0, 0]
    ref = ReferenceStats(0.3, 1.7, 100)
    plain, _ = batch_deviation_loss(list(scores), labels, ref, margin=4.0)
    tens, recorded = batch_deviation_loss([Tensor(s) for s in scores], labels,
                                          ref, margin=4.0)
    assert float(tens.data) == pytest.approx(plain, rel=1e-12)
    assert recorded.deviations == pytest.approx([(s - 0.3) / 1.7 for s in scores])


def test_batch_loss_rejects_mismatch():
    with pytest.raises(ContractError):
        batch_deviation_loss([1.0], [0, 1], UNIT_REF)
    with pytest.raises(ContractError):
        batch_deviation_loss([], [], UNIT_REF)
