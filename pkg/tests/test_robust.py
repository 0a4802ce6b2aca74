import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import bisect
from scipy.special import expit

from obree.logistic import LogisticModel, fit_mle, generate_design, simulate_responses
from obree.rng import derive_stream
from obree.robust import (
    consistency_correction,
    fit_robust,
    huber_psi,
    leverage_weights,
    pseudo_values,
    robust_estimating_function,
)


def test_huber_psi():
    assert huber_psi(0.5, 1.345) == 0.5
    assert huber_psi(3.0, 1.345) == 1.345
    assert huber_psi(-3.0, 1.345) == -1.345
    with pytest.raises(ValueError):
        huber_psi(1.0, 0.0)


def test_leverage_weights():
    assert np.allclose(leverage_weights(np.ones((4, 1))), math.sqrt(0.75), atol=1e-15)
    X = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))[0]
    assert np.allclose(leverage_weights(X), 0.0, atol=1e-7)
    X = generate_design(50, 4, seed=1)
    h = 1 - leverage_weights(X) ** 2
    assert h.sum() == pytest.approx(4.0, abs=1e-10)


def test_pseudo_values():
    assert np.array_equal(pseudo_values([1, 0], 0.01), [0.99, 0.01])
    assert np.array_equal(pseudo_values([1, 0], 0.0), [1.0, 0.0])
    assert np.array_equal(pseudo_values([1, 0], 0.25), [0.75, 0.25])
    with pytest.raises(ValueError):
        pseudo_values([1], 0.5)


def test_correction_vanishes_without_clipping():
    X = generate_design(30, 3, seed=2)
    assert np.allclose(consistency_correction(X, [1.0, -2.0, 0.3], c=np.inf), 0.0, atol=1e-15)


def test_correction_hand_enumeration():
    beta0 = math.log(4.0)  # mu = 0.8
    a = consistency_correction(np.ones((1, 1)), [beta0], c=1.345)
    assert a[0] == pytest.approx((0.5 * 0.8 - 1.345 * 0.2) * 2.5 * 0.16, abs=1e-15)


def _two_point_correction(X, beta, c, w):
    n = X.shape[0]
    total = np.zeros(X.shape[1])
    for i in range(n):
        mu = expit(X[i] @ beta)
        v = mu * (1 - mu)
        e = sum(p * np.clip((y - mu) / math.sqrt(v), -c, c) for y, p in ((1, mu), (0, 1 - mu)))
        total += e * w[i] * math.sqrt(v) * X[i]
    return total / n


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.3, 3.0))
def test_correction_matches_two_point_oracle(seed, c):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 3))
    beta = rng.normal(scale=1.5, size=3)
    w = rng.uniform(0.1, 1.0, size=6)
    assert np.allclose(consistency_correction(X, beta, c, w), _two_point_correction(X, beta, c, w),
                       rtol=0, atol=1e-12)


def test_unbounded_huber_reproduces_mle():
    X = generate_design(200, 4, seed=3)
    y = simulate_responses(X, np.array([1.0, -1.0, 0.5, 0.0]), derive_stream(3, [("rep", 1)]))
    rob = fit_robust(X, y, c=np.inf, weights=np.ones(200))
    assert rob.converged
    assert np.allclose(rob.beta_hat, fit_mle(X, y).beta_hat, atol=1e-8)


def test_intercept_only_matches_bisection_oracle():
    y = (derive_stream(4, [("obs", 0)]).uniform(20) < 0.7).astype(float)
    X = np.ones((20, 1))
    w = leverage_weights(X)
    fit = fit_robust(X, y, c=1.345)
    root = bisect(lambda b: robust_estimating_function(X, y, [b], 1.345, w)[0], -10, 10, xtol=1e-14)
    assert fit.converged
    assert fit.beta_hat[0] == pytest.approx(root, abs=1e-8)


def test_pseudo_values_keep_all_ones_finite():
    X = np.ones((10, 1))
    fit = fit_robust(X, pseudo_values(np.ones(10), 0.01))
    assert fit.converged and np.isfinite(fit.beta_hat[0])
    assert not fit_mle(X, np.ones(10)).converged


def test_estimating_equation_norm_at_convergence():
    X = generate_design(200, 5, seed=6)
    y = simulate_responses(X, np.array([2.0, -1.0, 0.0, 1.0, 0.5]), derive_stream(6, [("rep", 2)]))
    w = leverage_weights(X)
    for resp in (y, pseudo_values(y, 0.01)):
        fit = fit_robust(X, resp)
        assert fit.converged
        assert np.linalg.norm(robust_estimating_function(X, resp, fit.beta_hat, 1.345, w)) <= 1e-8


def test_fisher_consistency_at_truth():
    # observations are independent, so the expectation is a sum of two-point ones
    X = generate_design(40, 2, seed=8, variance=1.0)
    beta = np.array([1.0, -0.5])
    w = leverage_weights(X)
    mu = expit(X @ beta)
    total = np.zeros(2)
    for i in range(40):
        for yi, p in ((1.0, mu[i]), (0.0, 1 - mu[i])):
            total += p * robust_estimating_function(X[i:i + 1], [yi], beta, 1.345, w[i:i + 1]) / 40
    assert np.allclose(total, 0.0, atol=1e-15)


def test_model_uses_leverage_weights_and_pseudo_values():
    X = generate_design(100, 3, seed=5)
    model = LogisticModel(X, "robust", delta=0.01)
    y = simulate_responses(X, np.array([1.0, 0.0, -1.0]), derive_stream(5, [("rep", 1)]))
    direct = fit_robust(X, pseudo_values(y, 0.01)).beta_hat
    assert np.allclose(model.estimate(y), direct, atol=1e-9)
    assert np.allclose(model.weights, leverage_weights(X))
