"""Bounded-influence M-estimator for logistic regression.

The estimating function for observation i is

    psi_c(r_i) w_i V_i^{-1/2} dmu_i/dbeta - a(beta)

with Pearson residual ``r_i = (y_i - mu_i) / sqrt(V_i)``, Huber ``psi_c``,
leverage weights ``w_i = sqrt(1 - h_ii)`` and the correction ``a(beta)``
that restores Fisher consistency.  For the logit link ``dmu/dbeta = V x`` so
every term is a scalar function of the linear predictor times ``w_i x_i``;
this is what the batched solver exploits.

Responses may be pseudo-values ``(1 - delta) y + delta (1 - y)``, which keep
the fit finite under separation at the cost of a small asymptotic bias.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import EstimationError
from .logistic import DIVERGENCE_BOUND, FitResult, _solve_stack, irls_batch

__all__ = [
    "HUBER_C",
    "huber_psi",
    "leverage_weights",
    "pseudo_values",
    "consistency_correction",
    "robust_estimating_function",
    "robust_jacobian",
    "robust_batch",
    "fit_robust",
]

HUBER_C = 1.345
EQ_TOL = 1e-8
MU_EPS = 1e-12
_FD_STEP = 1e-6


def huber_psi(r, c=HUBER_C):
    if not c > 0:
        raise ValueError("Huber threshold must be positive")
    return np.clip(r, -c, c)


def leverage_weights(X):
    """``sqrt(1 - h_ii)`` from the hat matrix of ``X``."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < p:
        raise EstimationError("leverage weights need n >= p")
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.min() <= max(n, p) * np.finfo(float).eps * diag.max():
        raise EstimationError("design matrix is rank deficient")
    h = np.sum(Q * Q, axis=1)
    return np.sqrt(np.clip(1.0 - h, 0.0, 1.0))


def pseudo_values(y, delta):
    if not 0.0 <= delta < 0.5:
        raise ValueError(f"delta must lie in [0, 0.5), got {delta}")
    y = np.asarray(y, dtype=float)
    return (1.0 - delta) * y + delta * (1.0 - y)


def _mean_var(eta):
    mu = np.clip(expit(eta), MU_EPS, 1.0 - MU_EPS)
    return mu, np.sqrt(mu * (1.0 - mu))


def _correction_term(eta, c):
    """Exact two-point expectation of ``psi_c(r) sqrt(V)`` over y in {0, 1}."""
    mu, sv = _mean_var(eta)
    return (huber_psi((1.0 - mu) / sv, c) * mu + huber_psi(-mu / sv, c) * (1.0 - mu)) * sv


def _residual_terms(eta, y, c):
    """Per-observation scalar factor of the estimating function and its eta-derivative."""
    mu, sv = _mean_var(eta)
    r = (y - mu) / sv
    psi = huber_psi(r, c)
    inside = np.abs(r) <= c
    dr = -sv - r * (1.0 - 2.0 * mu) / 2.0
    dmain = np.where(inside, dr, 0.0) * sv + psi * (1.0 - 2.0 * mu) * sv / 2.0
    corr = _correction_term(eta, c)
    step = _FD_STEP * (1.0 + np.abs(eta))
    dcorr = (_correction_term(eta + step, c) - _correction_term(eta - step, c)) / (2.0 * step)
    return psi * sv - corr, dmain - dcorr


def consistency_correction(X, beta, c=HUBER_C, weights=None):
    """``a(beta) = (1/n) sum_i E[psi_c(r_i)] w_i V_i^{-1/2} dmu_i/dbeta``."""
    X = np.asarray(X, dtype=float)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    eta = X @ np.asarray(beta, dtype=float)
    return X.T @ (w * _correction_term(eta, c)) / X.shape[0]


def robust_estimating_function(X, y, beta, c=HUBER_C, weights=None):
    """Mean of the corrected robust estimating function at ``beta``."""
    X = np.asarray(X, dtype=float)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    eta = X @ np.asarray(beta, dtype=float)
    s, _ = _residual_terms(eta, np.asarray(y, dtype=float), c)
    return X.T @ (w * s) / X.shape[0]


def robust_jacobian(X, y, beta, c=HUBER_C, weights=None):
    X = np.asarray(X, dtype=float)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    eta = X @ np.asarray(beta, dtype=float)
    _, ds = _residual_terms(eta, np.asarray(y, dtype=float), c)
    return (X.T * (w * ds)) @ X / X.shape[0]


def robust_batch(X, Y, c=HUBER_C, weights=None, beta0=None, tol=EQ_TOL, max_iter=100,
                 bound=DIVERGENCE_BOUND):
    """Damped Newton on the robust equations for a stack of responses.

    Starts from the (batched) logistic MLE on the same responses unless
    ``beta0`` is given.  Same return layout as ``irls_batch``, with
    ``score_norm`` holding the Euclidean norm of the estimating function.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, p = X.shape
    H = Y.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    converged = np.zeros(H, bool)
    diverging = np.zeros(H, bool)
    singular = np.zeros(H, bool)
    iterations = np.zeros(H, int)
    fnorm = np.full(H, np.inf)
    if beta0 is None:
        start = irls_batch(X, Y, bound=bound)
        B = start["beta"].copy()
        bad = ~start["converged"]
        diverging |= start["diverging"]
        singular |= start["singular"]
        B[bad] = 0.0
        active = ~(start["diverging"] | start["singular"])
    else:
        B = np.array(beta0, dtype=float).reshape(H, p)
        active = np.ones(H, bool)

    def evaluate(Bs, Ys):
        eta = Bs @ X.T
        s, ds = _residual_terms(eta, Ys, c)
        return (w * s) @ X / n, ds

    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ba, Ya = B[idx], Y[idx]
        F, ds = evaluate(Ba, Ya)
        fnorm[idx] = np.linalg.norm(F, axis=1)
        done = fnorm[idx] <= tol
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == max_iter:
            break
        keep = ~done
        idx, Ba, Ya, F, ds = idx[keep], Ba[keep], Ya[keep], F[keep], ds[keep]
        if idx.size == 0:
            break
        J = (X.T[None, :, :] * (w * ds)[:, None, :]) @ X / n
        step = -_solve_stack(J, F)
        sing = ~np.all(np.isfinite(step), axis=1)
        if sing.any():
            singular[idx[sing]] = True
            active[idx[sing]] = False
            idx, Ba, Ya, F, step = idx[~sing], Ba[~sing], Ya[~sing], F[~sing], step[~sing]
        merit = np.sum(F * F, axis=1)
        t = np.ones(idx.size)
        for _ in range(30):
            cand = Ba + t[:, None] * step
            Fc, _ = evaluate(cand, Ya)
            worse = np.sum(Fc * Fc, axis=1) > merit
            if not worse.any():
                break
            t[worse] *= 0.5
        B[idx] = cand
        iterations[idx] += 1
        blown = np.max(np.abs(cand), axis=1) > bound
        diverging[idx[blown]] = True
        active[idx[blown]] = False

    return dict(beta=B, converged=converged, diverging=diverging, singular=singular,
                iterations=iterations, score_norm=fnorm)


def fit_robust(X, y, c=HUBER_C, weights=None, tol=EQ_TOL, max_iter=100, beta0=None):
    """Robust logistic fit; ``weights`` default to the leverage weights of ``X``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, p) and y of length n")
    if weights is None:
        weights = leverage_weights(X)
    out = robust_batch(X, y[None, :], c, weights, None if beta0 is None else np.asarray(beta0)[None, :],
                       tol, max_iter)
    conv = bool(out["converged"][0])
    message = ""
    if out["singular"][0]:
        message = "singular Jacobian"
    elif out["diverging"][0]:
        message = "coefficients diverging"
    elif not conv:
        message = "robust Newton did not converge"
    return FitResult(
        beta_hat=out["beta"][0],
        converged=conv,
        iterations=int(out["iterations"][0]),
        score_norm=float(out["score_norm"][0]),
        diverging=bool(out["diverging"][0]),
        message=message,
    )
