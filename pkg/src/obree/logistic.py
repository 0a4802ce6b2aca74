"""Logistic regression: designs, response simulation, IRLS maximum likelihood
and response contamination.

The IRLS solver works on a stack of response vectors sharing one design, so
the H replicas of a simulated bias surrogate are fitted in a single batched
Newton iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from .core import DomainBounds, SimulableModel
from .errors import EstimationError
from .rng import derive_stream

__all__ = [
    "FitResult",
    "covariate_variance",
    "generate_design",
    "responses_from_uniforms",
    "simulate_responses",
    "loglik",
    "score",
    "information",
    "is_separated",
    "irls_batch",
    "fit_mle",
    "contaminate",
    "LogisticModel",
]

SCORE_TOL = 1e-9
MAX_ITER = 100
DIVERGENCE_BOUND = 1e3
SEPARATION_CHECK_NORM = 25.0
SEPARATION_SAFETY = 10.0


@dataclass
class FitResult:
    beta_hat: np.ndarray
    converged: bool
    iterations: int
    score_norm: float
    diverging: bool = False
    message: str = ""

    def require(self):
        """Return ``beta_hat`` or raise ``EstimationError`` if the fit failed."""
        if not self.converged:
            raise EstimationError(self.message or "fit did not converge")
        return self.beta_hat


def covariate_variance(n):
    """Covariate variance ``4 / sqrt(n)``; keeps the log-odds scale fixed as n grows."""
    return 4.0 / np.sqrt(n)


def generate_design(n, p, mean=0.0, seed=0, tags=(("unit", 0),), variance=None, check_rank=True):
    """``n x p`` matrix of iid ``N(mean, variance)`` covariates from a fixed stream.

    ``variance`` defaults to ``4 / sqrt(n)``.
    """
    if check_rank and not n >= p >= 1:
        raise ValueError("need n >= p >= 1")
    if p < 1 or n < 1:
        raise ValueError("need n >= 1 and p >= 1")
    v = covariate_variance(n) if variance is None else float(variance)
    if not v > 0:
        raise ValueError("covariate variance must be positive")
    z = derive_stream(seed, tags).normal(n * p).reshape(n, p)
    return mean + np.sqrt(v) * z


def responses_from_uniforms(X, beta, u):
    """``y_i = 1{u_i <= expit(x_i beta)}``; ``u`` may be a stack of rows."""
    mu = expit(np.asarray(X) @ np.asarray(beta, dtype=float))
    return (np.asarray(u) <= mu).astype(np.uint8)


def simulate_responses(X, beta, stream):
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (X.shape[1],):
        raise ValueError("beta length must match the number of columns of X")
    return responses_from_uniforms(X, beta, stream.uniform(X.shape[0]))


def loglik(X, y, beta):
    """Bernoulli log-likelihood; accepts fractional responses."""
    eta = np.asarray(X) @ np.asarray(beta, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def score(X, y, beta):
    """Mean score ``(1/n) sum x_i (y_i - mu_i)``."""
    X = np.asarray(X, dtype=float)
    mu = expit(X @ np.asarray(beta, dtype=float))
    return X.T @ (np.asarray(y, dtype=float) - mu) / X.shape[0]


def information(X, beta):
    """Mean observed information ``(1/n) X' W X``."""
    X = np.asarray(X, dtype=float)
    mu = expit(X @ np.asarray(beta, dtype=float))
    return (X.T * (mu * (1.0 - mu))) @ X / X.shape[0]


def _batched_loglik(Y, eta):
    return np.sum(Y * eta - np.logaddexp(0.0, eta), axis=1)


def _solve_stack(A, b):
    """Solve a stack of systems; rows with a singular matrix come back NaN."""
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full_like(b, np.nan)
        for k in range(A.shape[0]):
            try:
                out[k] = np.linalg.solve(A[k], b[k])
            except np.linalg.LinAlgError:
                pass
        return out


def is_separated(X, y):
    """Exact check for complete or quasi-complete separation of binary ``y``.

    Looks for ``b`` with ``s_i x_i b >= 0`` for all i and ``sum_i s_i x_i b >= 1``
    (``s_i = +1`` for ones, ``-1`` for zeros); such a ray drives the likelihood
    up without bound, so the MLE does not exist.
    """
    X = np.asarray(X, dtype=float)
    s = np.where(np.asarray(y) > 0.5, 1.0, -1.0)
    SX = s[:, None] * X
    A = np.vstack([-SX, -SX.sum(axis=0)])
    b = np.zeros(X.shape[0] + 1)
    b[-1] = -1.0
    res = linprog(np.zeros(X.shape[1]), A_ub=A, b_ub=b, bounds=[(None, None)] * X.shape[1], method="highs")
    return res.status == 0


def irls_batch(X, Y, beta0=None, tol=SCORE_TOL, max_iter=MAX_ITER, bound=DIVERGENCE_BOUND,
               check_norm=SEPARATION_CHECK_NORM):
    """Damped Newton (IRLS) for a stack of response vectors on one design.

    Parameters
    ----------
    X : (n, p) array
    Y : (H, n) array of responses in [0, 1]
    beta0 : (H, p) array, optional
        Starting values; zeros by default.

    Returns
    -------
    dict with ``beta`` (H, p), ``converged``, ``diverging``, ``singular``
    (bool arrays), ``iterations`` (int array) and ``score_norm``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, p = X.shape
    H = Y.shape[0]
    B = np.zeros((H, p)) if beta0 is None else np.array(beta0, dtype=float).reshape(H, p)
    converged = np.zeros(H, bool)
    diverging = np.zeros(H, bool)
    singular = np.zeros(H, bool)
    iterations = np.zeros(H, int)
    snorm = np.full(H, np.inf)
    growth = np.zeros(H, int)
    active = np.ones(H, bool)

    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ba, Ya = B[idx], Y[idx]
        eta = Ba @ X.T
        mu = expit(eta)
        S = (Ya - mu) @ X / n
        snorm[idx] = np.linalg.norm(S, axis=1)
        done = snorm[idx] <= tol
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == max_iter:
            break
        keep = ~done
        idx, Ba, Ya, eta, mu, S = idx[keep], Ba[keep], Ya[keep], eta[keep], mu[keep], S[keep]
        if idx.size == 0:
            break
        W = mu * (1.0 - mu)
        info = (X.T[None, :, :] * W[:, None, :]) @ X / n
        step = _solve_stack(info, S)
        sing = ~np.all(np.isfinite(step), axis=1)
        if sing.any():
            singular[idx[sing]] = True
            active[idx[sing]] = False
            idx, Ba, Ya, eta, step = idx[~sing], Ba[~sing], Ya[~sing], eta[~sing], step[~sing]
        ll_old = _batched_loglik(Ya, eta)
        t = np.ones(idx.size)
        for _ in range(40):
            cand = Ba + t[:, None] * step
            ll_new = _batched_loglik(Ya, cand @ X.T)
            bad = ll_new < ll_old - 1e-12 * np.abs(ll_old)
            if not bad.any():
                break
            t[bad] *= 0.5
        old_norm = np.max(np.abs(Ba), axis=1)
        B[idx] = cand
        iterations[idx] += 1
        new_norm = np.max(np.abs(cand), axis=1)
        growth[idx] = np.where(new_norm > old_norm, growth[idx] + 1, 0)
        blown = new_norm > bound
        diverging[idx[blown]] = True
        active[idx[blown]] = False

    # the step count ran out while the norm kept growing
    diverging |= (~converged) & (growth >= 5)
    # Under quasi-separation the score underflows below tol long before the
    # norm bound is reached.  A separating direction d forces
    # d'Id <= sqrt(p) * score * max|x_i| * |d|^2 (the weights are bounded by the
    # residuals), so only fits with an information eigenvalue that small can
    # be separated; certify those with an LP.
    binary = np.all((Y == 0) | (Y == 1), axis=1)
    cand = np.flatnonzero(converged & binary)
    if cand.size:
        mu = expit(B[cand] @ X.T)
        info = (X.T[None, :, :] * (mu * (1.0 - mu))[:, None, :]) @ X / n
        lam = np.linalg.eigvalsh(info)[:, 0]
        xmax = np.sqrt(np.max(np.sum(X * X, axis=1)))
        limit = SEPARATION_SAFETY * np.sqrt(p) * np.maximum(snorm[cand], np.finfo(float).tiny) * xmax
        for k in cand[(lam <= limit) | (np.max(np.abs(B[cand]), axis=1) > check_norm)]:
            if is_separated(X, Y[k]):
                converged[k] = False
                diverging[k] = True
    return dict(beta=B, converged=converged, diverging=diverging, singular=singular,
                iterations=iterations, score_norm=snorm)


def fit_mle(X, y, tol=SCORE_TOL, max_iter=MAX_ITER, bound=DIVERGENCE_BOUND, beta0=None):
    """Logistic MLE by IRLS; ``y`` may hold binary or fractional responses."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, p) and y of length n")
    if X.shape[0] < X.shape[1]:
        raise ValueError("need n >= p")
    out = irls_batch(X, y[None, :], None if beta0 is None else np.asarray(beta0)[None, :], tol, max_iter, bound)
    conv = bool(out["converged"][0])
    message = ""
    if out["singular"][0]:
        message = "rank-deficient weighted design"
    elif out["diverging"][0]:
        message = "separation: coefficients diverging"
    elif not conv:
        message = "IRLS did not converge"
    return FitResult(
        beta_hat=out["beta"][0],
        converged=conv,
        iterations=int(out["iterations"][0]),
        score_norm=float(out["score_norm"][0]),
        diverging=bool(out["diverging"][0]),
        message=message,
    )


def contaminate(y, mu, rate):
    """Swap responses between extreme-probability pairs.

    ``m = round(rate * n / 2)`` pairs are formed by matching the i-th largest
    ``mu`` with the i-th smallest; each pair exchanges its responses.  The
    response total is unchanged.
    """
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    n = y.size
    if mu.shape != y.shape:
        raise ValueError("y and mu must have the same length")
    if not 0.0 <= rate < 1.0:
        raise ValueError("contamination rate must lie in [0, 1)")
    out = y.copy()
    if rate == 0.0:
        return out
    if rate * n < 2:
        raise ValueError("rate * n must be at least 2 to form a pair")
    m = int(np.floor(rate * n / 2.0 + 0.5))
    order = np.argsort(-mu, kind="stable")
    hi, lo = order[:m], order[::-1][:m]
    out[hi], out[lo] = y[lo], y[hi]
    return out


class LogisticModel(SimulableModel):
    """Logistic regression on a fixed design as a ``SimulableModel``.

    ``estimator`` is ``"mle"`` or ``"robust"``; with ``delta > 0`` the fit is
    run on pseudo-values, both on observed data and on every replica.
    """

    def __init__(self, X, estimator="mle", delta=0.0, huber_c=None, bound=100.0):
        from .robust import HUBER_C, leverage_weights

        self.X = np.asarray(X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] < self.X.shape[1]:
            raise ValueError("X must be (n, p) with n >= p")
        if estimator not in ("mle", "robust"):
            raise ValueError(f"unknown logistic estimator {estimator!r}")
        if not 0.0 <= delta < 0.5:
            raise ValueError("delta must lie in [0, 0.5)")
        self.n, self.dim = self.X.shape
        self.estimator = estimator
        self.delta = float(delta)
        self.huber_c = HUBER_C if huber_c is None else float(huber_c)
        self.bound = float(bound)
        # X is fixed, so the leverage weights are too
        self.weights = leverage_weights(self.X) if estimator == "robust" else None

    def __repr__(self):
        return f"LogisticModel(n={self.n}, p={self.dim}, estimator={self.estimator!r}, delta={self.delta})"

    def draw(self, stream):
        return stream.uniform(self.n)

    def generate(self, theta, draws):
        return responses_from_uniforms(self.X, theta, draws)

    def _responses(self, y):
        y = np.asarray(y, dtype=float)
        if self.delta > 0:
            from .robust import pseudo_values

            return pseudo_values(y, self.delta)
        return y

    def fit_batch(self, Y):
        """Fit a stack of binary response vectors; failed rows are NaN."""
        Yt = self._responses(np.atleast_2d(Y))
        if self.estimator == "mle":
            out = irls_batch(self.X, Yt)
        else:
            from .robust import robust_batch

            out = robust_batch(self.X, Yt, self.huber_c, self.weights)
        est = out["beta"].copy()
        est[~out["converged"]] = np.nan
        return est

    def estimate(self, data):
        est = self.fit_batch(np.asarray(data)[None, :])[0]
        if not np.all(np.isfinite(est)):
            raise EstimationError(f"{self.estimator} fit failed")
        return est

    def estimate_replicas(self, theta, draws):
        Y = responses_from_uniforms(self.X, np.asarray(theta, dtype=float), np.asarray(draws))
        return self.fit_batch(Y)

    def default_bounds(self):
        return DomainBounds.uniform(self.dim, -self.bound, self.bound)
