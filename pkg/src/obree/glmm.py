"""Random-intercept logistic regression.

``P(y_ij = 1 | U_i) = expit(x_ij' beta + U_i)`` with ``U_i ~ N(0, sigma2)``.

Two estimators are provided.  ``fit_mle_ghq`` maximizes the marginal
likelihood, each cluster integral computed by adaptive Gauss-Hermite
quadrature.  ``fit_joint_mode`` is the cheap penalized estimator: it maximizes
the joint log-likelihood of ``(beta, u)`` under a Gaussian penalty on ``u`` and
updates ``sigma2`` from the conditional modes and Laplace variances.  The
latter is mildly biased for ``sigma2`` and is the natural initial estimator
for bias correction by simulation.

The parameter vector seen by the fixed-point solver is ``(beta, sigma2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit, logsumexp

from .core import DomainBounds, SimulableModel
from .errors import EstimationError
from .logistic import DIVERGENCE_BOUND, _solve_stack, irls_batch

__all__ = [
    "ClusteredData",
    "GlmmParams",
    "GlmmFit",
    "GlmmModel",
    "GHQ_NODES",
    "clustered_design",
    "simulate_glmm",
    "marginal_loglik_ghq",
    "fit_mle_ghq",
    "fit_joint_mode",
    "joint_mode_batch",
]

GHQ_NODES = 31
LOG_SIGMA_FLOOR = -15.0
GRAD_TOL = 1e-6
SIGMA2_TOL = 1e-9
COLLAPSE_LEVEL = 1e-5
INNER_TOL = 1e-10


@dataclass(frozen=True)
class ClusteredData:
    """Rows of ``X`` grouped into clusters ``0..m-1``; ``y`` may be absent (a design)."""

    X: np.ndarray
    cluster: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        g = np.asarray(self.cluster)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if g.shape != (X.shape[0],):
            raise ValueError("cluster labels must have one entry per row of X")
        if not np.issubdtype(g.dtype, np.integer):
            if not np.all(g == np.round(g)):
                raise ValueError("cluster labels must be integers")
            g = g.astype(np.int64)
        labels = np.unique(g)
        if labels.size < 2:
            raise ValueError("at least two clusters are required")
        if labels[0] != 0 or labels[-1] != labels.size - 1:
            raise ValueError("cluster labels must be 0..m-1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "cluster", g)
        if self.y is not None:
            y = np.asarray(self.y)
            if y.shape != g.shape:
                raise ValueError("y must have one entry per row of X")
            if not np.all((y == 0) | (y == 1)):
                raise ValueError("responses must be binary")
            object.__setattr__(self, "y", y.astype(np.uint8))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def q(self):
        return self.X.shape[1]

    @property
    def m(self):
        return int(self.cluster.max()) + 1

    @property
    def sizes(self):
        return np.bincount(self.cluster, minlength=self.m)

    def indicator(self):
        """Dense ``n x m`` cluster membership matrix."""
        Z = np.zeros((self.n, self.m))
        Z[np.arange(self.n), self.cluster] = 1.0
        return Z

    def with_responses(self, y):
        return ClusteredData(self.X, self.cluster, y)


@dataclass(frozen=True)
class GlmmParams:
    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ValueError("beta must be a finite vector")
        s2 = float(self.sigma2)
        if not (math.isfinite(s2) and s2 >= 0.0):
            raise ValueError("sigma2 must be finite and non-negative")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2", s2)

    def to_vector(self):
        return np.append(self.beta, self.sigma2)

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        return cls(theta[:-1], max(theta[-1], 0.0))


@dataclass
class GlmmFit:
    params: GlmmParams
    converged: bool
    iterations: int
    grad_norm: float
    boundary: bool = False
    diverging: bool = False
    loglik: float = float("nan")
    message: str = ""

    @property
    def theta(self):
        return self.params.to_vector()


def clustered_design(m, cluster_size, q, mean=0.0, variance=None, seed=0, tags=(("unit", 0),)):
    """Intercept column plus ``q - 1`` normal covariates for ``m`` equal clusters.

    ``variance`` defaults to ``4 / sqrt(n)`` as in the plain logistic design.
    """
    from .logistic import generate_design

    if m < 2 or cluster_size < 1 or q < 1:
        raise ValueError("need m >= 2, cluster_size >= 1 and q >= 1")
    n = m * cluster_size
    cols = [np.ones((n, 1))]
    if q > 1:
        cols.append(generate_design(n, q - 1, mean=mean, variance=variance, seed=seed, tags=tags,
                                    check_rank=False))
    return ClusteredData(np.hstack(cols), np.repeat(np.arange(m), cluster_size))


def _split_draws(draws, n):
    draws = np.asarray(draws, dtype=float)
    return draws[..., :n], draws[..., n:]


def simulate_glmm(design, params, stream):
    """Responses for one dataset.

    The stream supplies ``n`` uniforms followed by ``m`` standard normals, so
    at ``sigma2 = 0`` the responses coincide with the plain logistic ones from
    the same stream.
    """
    u = stream.uniform(design.n)
    z = stream.normal(design.m)
    return design.with_responses(_responses(design, params.beta, params.sigma2, u, z))


def _responses(design, beta, sigma2, u, z):
    """``1{u <= expit(x beta + sigma z_cluster)}``; ``u`` and ``z`` may be stacks of rows."""
    offset = math.sqrt(sigma2) * np.asarray(z)[..., design.cluster]
    return (np.asarray(u) <= expit(design.X @ beta + offset)).astype(np.uint8)


def _cluster_sum(values, design):
    return np.bincount(design.cluster, weights=values, minlength=design.m)


def _cluster_modes(design, eta, y, sigma2, tol=1e-13, max_iter=100):
    """Posterior mode of each random intercept by Newton with a bisection guard."""
    m = design.m
    sizes = design.sizes.astype(float)
    lo = -sizes * sigma2
    hi = sizes * sigma2
    u = np.zeros(m)
    for _ in range(max_iter):
        mu = expit(eta + u[design.cluster])
        g = _cluster_sum(y - mu, design) - u / sigma2
        curv = _cluster_sum(mu * (1.0 - mu), design) + 1.0 / sigma2
        lo = np.where(g > 0, u, lo)
        hi = np.where(g < 0, u, hi)
        step = g / curv
        nxt = u + step
        outside = (nxt <= lo) | (nxt >= hi)
        nxt = np.where(outside, 0.5 * (lo + hi), nxt)
        done = np.abs(nxt - u) <= tol * (1.0 + np.abs(u))
        u = nxt
        if np.all(done):
            break
    mu = expit(eta + u[design.cluster])
    curv = _cluster_sum(mu * (1.0 - mu), design) + 1.0 / sigma2
    return u, curv


def marginal_loglik_ghq(data, params, nodes=GHQ_NODES):
    """Marginal log-likelihood with adaptive Gauss-Hermite quadrature.

    Each cluster integral is centred at the posterior mode of its intercept
    and scaled by the posterior curvature.  ``sigma2 = 0`` is the exact
    point-mass limit.  ``nodes = 1`` is the Laplace approximation.
    """
    nodes = int(nodes)
    if nodes < 1 or nodes % 2 == 0:
        raise ValueError("the number of quadrature nodes must be a positive odd integer")
    if data.y is None:
        raise ValueError("data has no responses")
    y = data.y.astype(float)
    eta = data.X @ params.beta
    if params.sigma2 == 0.0:
        return float(np.sum(y * eta + log_expit(-eta)))
    s2 = params.sigma2
    mode, curv = _cluster_modes(data, eta, y, s2)
    scale = math.sqrt(2.0) / np.sqrt(curv)
    z, w = np.polynomial.hermite.hermgauss(nodes)
    u = mode[:, None] + scale[:, None] * z[None, :]
    eta_k = eta[:, None] + u[data.cluster]
    ll = y[:, None] * eta_k + log_expit(-eta_k)
    per_cluster = ll.T @ data.indicator()
    log_prior = -0.5 * u * u / s2 - 0.5 * math.log(2.0 * math.pi * s2)
    terms = per_cluster.T + log_prior + z[None, :] ** 2
    return float(np.sum(logsumexp(terms, b=w[None, :], axis=1) + np.log(scale)))


def _central_gradient(f, x, rel_step=1e-5):
    g = np.empty_like(x)
    for j in range(x.size):
        h = rel_step * (1.0 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _pooled_fit(data):
    out = irls_batch(data.X, data.y[None, :].astype(float))
    return out["beta"][0], bool(out["converged"][0]), bool(out["diverging"][0])


def fit_mle_ghq(data, nodes=GHQ_NODES, max_iter=500, start=None):
    """Marginal maximum likelihood over ``(beta, log sigma)`` by BFGS.

    Gradients are central differences of the quadrature log-likelihood.  When
    the optimum sits at ``sigma2 = 0`` (``log sigma`` drifting below the
    floor, or the pooled fit scoring at least as high) the boundary solution
    with the pooled logistic ``beta`` is returned with ``boundary=True``.
    """
    if data.y is None:
        raise ValueError("data has no responses")
    q = data.q
    pooled, pooled_ok, pooled_div = _pooled_fit(data)
    if start is None:
        x0 = np.append(pooled if pooled_ok else np.zeros(q), 0.0)
    else:
        x0 = np.append(np.asarray(start.beta, dtype=float), 0.5 * math.log(max(start.sigma2, 1e-4)))

    def negll(x):
        if x[-1] < 2.0 * LOG_SIGMA_FLOOR or np.max(np.abs(x[:-1])) > DIVERGENCE_BOUND:
            return np.inf
        return -marginal_loglik_ghq(data, GlmmParams(x[:-1], math.exp(2.0 * x[-1])), nodes)

    def grad(x):
        return _central_gradient(negll, x)

    res = minimize(negll, x0, jac=grad, method="BFGS", options=dict(gtol=GRAD_TOL, maxiter=max_iter))
    x = res.x
    diverging = bool(np.max(np.abs(x[:-1])) > 0.5 * DIVERGENCE_BOUND)
    g = grad(x)
    gnorm = float(np.max(np.abs(g)))
    params = GlmmParams(x[:-1], math.exp(2.0 * x[-1]))
    loglik = -float(res.fun)
    boundary = False
    if pooled_ok:
        at_zero = marginal_loglik_ghq(data, GlmmParams(pooled, 0.0), nodes)
        if x[-1] < LOG_SIGMA_FLOOR or at_zero >= loglik - 1e-10:
            boundary = True
            params = GlmmParams(pooled, 0.0)
            loglik = at_zero
            gnorm = float(np.max(np.abs(data.X.T @ (data.y - expit(data.X @ pooled)))))
    converged = (gnorm <= GRAD_TOL or boundary) and not diverging and np.isfinite(loglik)
    if pooled_div and not boundary and not converged:
        diverging = True
    message = "" if converged else ("coefficients diverging" if diverging else str(res.message))
    return GlmmFit(params, bool(converged), int(res.nit), gnorm, boundary, diverging, loglik, message)


def joint_mode_batch(design, Y, sigma2_fixed=None, tol=SIGMA2_TOL, max_outer=500, bound=DIVERGENCE_BOUND,
                     sigma2_start=1.0, variance="conditional"):
    """Joint-mode estimator for a stack of response vectors on one design.

    For a given ``sigma2`` the penalized joint log-likelihood

        sum_ij l(y_ij; x_ij' beta + u_i) - sum_i u_i^2 / (2 sigma2)

    is maximized in ``(beta, u)`` by Newton with a Schur complement on the
    diagonal ``u`` block.  Then ``sigma2 <- mean(u_i^2 + v_i)`` with ``v_i``
    the conditional posterior variance.  The outer iteration is accelerated by
    Aitken extrapolation; a ``sigma2`` sequence heading to zero while the
    pooled fit shows no overdispersion is declared collapsed and set to 0.

    Returns a dict with ``theta`` (B, q+1), ``converged``, ``collapsed``,
    ``diverging`` and ``iterations``.
    """
    X = design.X
    Z = design.indicator()
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    B, n = Y.shape
    q, m = design.q, design.m
    beta = np.zeros((B, q))
    u = np.zeros((B, m))
    converged = np.zeros(B, bool)
    collapsed = np.zeros(B, bool)
    diverging = np.zeros(B, bool)
    iterations = np.zeros(B, int)

    pooled = irls_batch(X, Y, bound=bound)
    diverging |= pooled["diverging"] | pooled["singular"]
    start_ok = pooled["converged"]
    beta[start_ok] = pooled["beta"][start_ok]

    if sigma2_fixed is not None and float(sigma2_fixed) == 0.0:
        ok = pooled["converged"]
        theta = np.hstack([pooled["beta"], np.zeros((B, 1))])
        theta[~ok] = np.nan
        return dict(theta=theta, converged=ok.copy(), collapsed=np.zeros(B, bool), diverging=diverging,
                    iterations=pooled["iterations"].copy())

    # overdispersion of cluster score totals at the pooled fit decides whether 0 attracts
    mu0 = expit(pooled["beta"] @ X.T)
    overdispersed = np.mean(((Y - mu0) @ Z) ** 2, axis=1) > np.mean((mu0 * (1 - mu0)) @ Z, axis=1)

    s2 = np.full(B, float(sigma2_start if sigma2_fixed is None else sigma2_fixed))
    active = ~diverging
    history = [np.full(B, np.nan), np.full(B, np.nan)]

    def inner(idx, beta_a, u_a, s2_a):
        """Newton on (beta, u) for fixed sigma2; returns modes, v and a success mask."""
        Ya = Y[idx]
        prec = 1.0 / s2_a[:, None]
        ok = np.ones(idx.size, bool)

        def objective(b, uu):
            eta = b @ X.T + uu @ Z.T
            return np.sum(Ya * eta + log_expit(-eta), axis=1) - 0.5 * np.sum(uu * uu, axis=1) * prec[:, 0]

        for _ in range(100):
            eta = beta_a @ X.T + u_a @ Z.T
            mu = expit(eta)
            w = mu * (1.0 - mu)
            r = Ya - mu
            g_b = r @ X
            g_u = r @ Z - u_a * prec
            gnorm = np.maximum(np.max(np.abs(g_b), axis=1), np.max(np.abs(g_u), axis=1))
            todo = gnorm > INNER_TOL * n
            if not todo.any():
                break
            D = w @ Z + prec
            C = np.einsum("bn,nq,nm->bqm", w, X, Z)
            Hbb = np.einsum("bn,nq,nr->bqr", w, X, X)
            S = Hbb - np.einsum("bqm,bm,brm->bqr", C, 1.0 / D, C)
            rhs = g_b - np.einsum("bqm,bm->bq", C, g_u / D)
            d_b = _solve_stack(S, rhs)
            bad = ~np.all(np.isfinite(d_b), axis=1)
            ok &= ~bad
            d_b[bad] = 0.0
            d_u = (g_u - np.einsum("bqm,bq->bm", C, d_b)) / D
            d_b[~todo] = 0.0
            d_u[~todo] = 0.0
            base = objective(beta_a, u_a)
            t = np.ones(idx.size)
            for _ in range(40):
                cand_b = beta_a + t[:, None] * d_b
                cand_u = u_a + t[:, None] * d_u
                worse = objective(cand_b, cand_u) < base - 1e-12 * np.abs(base)
                if not worse.any():
                    break
                t[worse] *= 0.5
            beta_a, u_a = cand_b, cand_u
            ok &= np.max(np.abs(beta_a), axis=1) <= bound
        eta = beta_a @ X.T + u_a @ Z.T
        mu = expit(eta)
        w = mu * (1.0 - mu)
        D = w @ Z + prec
        v = 1.0 / D
        if variance == "joint":
            C = np.einsum("bn,nq,nm->bqm", w, X, Z)
            S = np.einsum("bn,nq,nr->bqr", w, X, X) - np.einsum("bqm,bm,brm->bqr", C, v, C)
            SC = np.linalg.solve(S, C)
            v = v + np.einsum("bqm,bqm->bm", C, SC) * v * v
        ok &= np.all(np.isfinite(beta_a), axis=1) & np.all(np.isfinite(u_a), axis=1)
        return beta_a, u_a, v, ok

    if sigma2_fixed is not None:
        idx = np.flatnonzero(active)
        b_a, u_a, _, ok = inner(idx, beta[idx], u[idx], s2[idx])
        beta[idx], u[idx] = b_a, u_a
        diverging[idx[~ok]] = True
        converged[idx[ok]] = True
        iterations[idx] = 1
    else:
        for outer in range(max_outer):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            b_a, u_a, v, ok = inner(idx, beta[idx], u[idx], s2[idx])
            beta[idx], u[idx] = b_a, u_a
            if (~ok).any():
                diverging[idx[~ok]] = True
                active[idx[~ok]] = False
            new = np.mean(u_a * u_a + v, axis=1)
            iterations[idx] += 1
            step = np.abs(new - s2[idx])
            done = ok & (step <= tol * (1.0 + s2[idx]))
            # Aitken extrapolation on every third iterate
            prev1 = history[1][idx]
            if outer % 3 == 2:
                d1 = s2[idx] - prev1
                d2 = new - s2[idx]
                ratio = np.divide(d2, d1, out=np.zeros_like(d2), where=d1 != 0)
                acc = new - d2 * d2 / np.where(d2 - d1 != 0, d2 - d1, np.inf)
                use = ok & ~done & (ratio > 0) & (ratio < 1) & np.isfinite(acc) & (acc > 0)
                new = np.where(use, acc, new)
            history = [history[1].copy(), s2.copy()]
            history[1][idx] = s2[idx]
            falling = ok & ~done & (new < COLLAPSE_LEVEL) & ~overdispersed[idx]
            s2[idx] = new
            converged[idx[done]] = True
            active[idx[done]] = False
            if falling.any():
                hit = idx[falling]
                collapsed[hit] = True
                converged[hit] = True
                active[hit] = False
                s2[hit] = 0.0
                beta[hit] = pooled["beta"][hit]
                u[hit] = 0.0

    theta = np.hstack([beta, s2[:, None]])
    theta[~converged | diverging] = np.nan
    return dict(theta=theta, converged=converged & ~diverging, collapsed=collapsed, diverging=diverging,
                iterations=iterations)


def fit_joint_mode(data, sigma2_fixed=None, tol=SIGMA2_TOL, max_outer=500):
    """Joint-mode (penalized) estimator on one dataset; see ``joint_mode_batch``."""
    if data.y is None:
        raise ValueError("data has no responses")
    out = joint_mode_batch(data, data.y[None, :], sigma2_fixed=sigma2_fixed, tol=tol, max_outer=max_outer)
    theta = out["theta"][0]
    conv = bool(out["converged"][0])
    if conv:
        params = GlmmParams(theta[:-1], theta[-1])
    else:
        params = GlmmParams(np.zeros(data.q), 0.0)
    message = ""
    if out["diverging"][0]:
        message = "coefficients diverging"
    elif not conv:
        message = "sigma2 update did not settle"
    elif out["collapsed"][0]:
        message = "sigma2 collapsed to 0"
    return GlmmFit(params, conv, int(out["iterations"][0]), float("nan"), boundary=bool(out["collapsed"][0]),
                   diverging=bool(out["diverging"][0]), message=message)


class GlmmModel(SimulableModel):
    """Random-intercept logistic model on a fixed clustered design.

    ``theta = (beta, sigma2)``.  ``estimator`` is ``"joint_mode"`` (batched
    across replicas) or ``"ghq"``.
    """

    def __init__(self, design, estimator="joint_mode", nodes=GHQ_NODES, beta_bound=100.0, sigma2_bound=100.0):
        if estimator not in ("joint_mode", "ghq"):
            raise ValueError(f"unknown GLMM estimator {estimator!r}")
        self.design = ClusteredData(design.X, design.cluster)
        self.estimator = estimator
        self.nodes = int(nodes)
        self.dim = design.q + 1
        self.beta_bound = float(beta_bound)
        self.sigma2_bound = float(sigma2_bound)

    def __repr__(self):
        d = self.design
        return f"GlmmModel(m={d.m}, n={d.n}, q={d.q}, estimator={self.estimator!r})"

    def draw(self, stream):
        u = stream.uniform(self.design.n)
        return np.concatenate([u, stream.normal(self.design.m)])

    def _responses(self, theta, draws):
        theta = np.asarray(theta, dtype=float)
        u, z = _split_draws(draws, self.design.n)
        return _responses(self.design, theta[:-1], max(float(theta[-1]), 0.0), u, z)

    def generate(self, theta, draws):
        return self._responses(theta, draws)

    def fit_batch(self, Y):
        Y = np.atleast_2d(Y)
        if self.estimator == "joint_mode":
            return joint_mode_batch(self.design, Y)["theta"]
        out = np.full((Y.shape[0], self.dim), np.nan)
        for h, y in enumerate(Y):
            fit = fit_mle_ghq(self.design.with_responses(y), self.nodes)
            if fit.converged:
                out[h] = fit.theta
        return out

    def estimate(self, data):
        y = data.y if isinstance(data, ClusteredData) else data
        est = self.fit_batch(np.asarray(y)[None, :])[0]
        if not np.all(np.isfinite(est)):
            raise EstimationError(f"{self.estimator} fit failed")
        return est

    def estimate_replicas(self, theta, draws):
        return self.fit_batch(self._responses(theta, np.asarray(draws)))

    def default_bounds(self):
        lower = np.append(np.full(self.dim - 1, -self.beta_bound), 0.0)
        upper = np.append(np.full(self.dim - 1, self.beta_bound), self.sigma2_bound)
        return DomainBounds(lower, upper)
