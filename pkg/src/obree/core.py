"""Iterative-bootstrap fixed point for simulable models.

Given an initial estimate ``theta_tilde`` and a model that can simulate data
at any parameter value and re-estimate on it, the bias-reduced estimate is the
fixed point of

    T(theta) = theta_tilde - (pi_star(theta) - theta),

where ``pi_star`` averages the estimator over ``H`` simulated samples drawn
from fixed streams.  The iteration ``theta <- T(theta)`` starting at
``theta_tilde`` converges to it at a geometric rate when the bias function is
flat enough.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, SolverFailure, SurrogateFailure
from .rng import derive_stream

__all__ = [
    "DomainBounds",
    "SimulationBudget",
    "IBResult",
    "SimulableModel",
    "FAILURE_POLICIES",
    "project_to_domain",
    "ib_step",
    "replica_draws",
    "replica_estimates",
    "surrogate_pi",
    "solve_fixed_point",
]

log = logging.getLogger(__name__)

FAILURE_POLICIES = ("drop", "retry", "abort")


@dataclass(frozen=True)
class DomainBounds:
    """Componentwise box for the parameter."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("bounds must be 1-d vectors of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("bounds must be finite (compact parameter set)")
        if np.any(lower >= upper):
            raise ValueError("each lower bound must be strictly below its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self):
        return self.lower.size

    def contains(self, theta, strict=False):
        theta = np.asarray(theta, dtype=float)
        if strict:
            return bool(np.all(theta > self.lower) and np.all(theta < self.upper))
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    @classmethod
    def uniform(cls, dim, lower, upper):
        return cls(np.full(dim, float(lower)), np.full(dim, float(upper)))


@dataclass(frozen=True)
class SimulationBudget:
    """How hard to work on the surrogate and the fixed point.

    ``tol`` is relative: iteration stops once the sup-norm displacement is at
    most ``tol * (1 + |theta|_inf)``.
    """

    H: int = 50
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 50
    use_exact_pi: bool = False
    failure_policy: str = "drop"
    max_retries: int = 3

    def __post_init__(self):
        if int(self.H) < 1:
            raise ValueError("H must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")
        if self.failure_policy not in FAILURE_POLICIES:
            raise ValueError(f"failure_policy must be one of {FAILURE_POLICIES}")
        if int(self.max_retries) < 0:
            raise ValueError("max_retries must be non-negative")


@dataclass
class IBResult:
    theta_hat: np.ndarray
    iterates: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    failures: int = 0
    clamped: bool = False

    @property
    def scaled_residual(self):
        """Last displacement divided by ``1 + |theta_hat|_inf``."""
        if not self.residuals:
            return float("nan")
        return self.residuals[-1] / (1.0 + float(np.max(np.abs(self.theta_hat))))


class SimulableModel:
    """Contract between a parametric model and the fixed-point solver.

    Subclasses provide

    * ``dim``: parameter dimension;
    * ``draw(stream)``: the parameter-free random inputs of one simulated
      sample, as a 1-d float array of fixed length;
    * ``generate(theta, draws)``: the dataset obtained by pushing those inputs
      through the model at ``theta``;
    * ``estimate(data)``: the estimator, raising ``EstimationError`` on failure.

    ``estimate_replicas`` may be overridden with a vectorized version, and
    ``exact_pi`` where the expectation of the estimator is known in closed form.
    Implementations must not keep mutable state between calls.
    """

    dim: int

    def draw(self, stream):
        raise NotImplementedError

    def generate(self, theta, draws):
        raise NotImplementedError

    def estimate(self, data):
        raise NotImplementedError

    def simulate(self, theta, stream):
        return self.generate(np.asarray(theta, dtype=float), self.draw(stream))

    def estimate_replicas(self, theta, draws):
        """Estimates for a stack of replica draws; failed rows are NaN."""
        theta = np.asarray(theta, dtype=float)
        out = np.full((len(draws), self.dim), np.nan)
        for h, d in enumerate(draws):
            try:
                est = np.asarray(self.estimate(self.generate(theta, d)), dtype=float)
            except EstimationError:
                continue
            if est.shape == (self.dim,) and np.all(np.isfinite(est)):
                out[h] = est
        return out

    def exact_pi(self, theta):
        raise NotImplementedError(f"{type(self).__name__} has no closed-form expectation")

    @property
    def has_exact_pi(self):
        return type(self).exact_pi is not SimulableModel.exact_pi

    def default_bounds(self):
        raise NotImplementedError


def project_to_domain(theta, bounds):
    """Clamp ``theta`` into the box; returns ``(projected, clamped)``."""
    theta = np.asarray(theta, dtype=float)
    out = np.clip(theta, bounds.lower, bounds.upper)
    return out, bool(np.any(out != theta))


def ib_step(theta_k, theta_tilde, pi_star_at_k):
    """One application of the map: ``theta_tilde - (pi_star_at_k - theta_k)``."""
    theta_k = np.asarray(theta_k, dtype=float)
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    pi_star_at_k = np.asarray(pi_star_at_k, dtype=float)
    if not (theta_k.shape == theta_tilde.shape == pi_star_at_k.shape):
        raise ValueError("ib_step arguments must share one shape")
    return theta_tilde - (pi_star_at_k - theta_k)


def _replica_tags(rep_tag, h):
    return [("rep", int(rep_tag)), ("sim", int(h))]


def replica_draws(model, budget, rep_tag=0, indices=None):
    """Stack the parameter-free inputs of the replicas ``indices`` (default ``0..H-1``)."""
    if indices is None:
        indices = range(budget.H)
    rows = [model.draw(derive_stream(budget.seed, _replica_tags(rep_tag, h))) for h in indices]
    return np.vstack(rows)


def replica_estimates(model, theta, budget, rep_tag=0, draws=None):
    """Per-replica estimates at ``theta`` after applying the failure policy.

    Returns ``(estimates, failures)``: an ``(H, p)`` array whose failed rows are
    NaN (``drop``) or replaced (``retry``), and the count of failed fits.
    """
    if draws is None:
        draws = replica_draws(model, budget, rep_tag)
    est = model.estimate_replicas(theta, draws)
    bad = ~np.all(np.isfinite(est), axis=1)
    failures = int(bad.sum())
    if failures and budget.failure_policy == "abort":
        raise SurrogateFailure(f"{failures} of {budget.H} replica estimates failed (abort policy)")
    if failures and budget.failure_policy == "retry":
        for attempt in range(1, budget.max_retries + 1):
            idx = np.flatnonzero(bad)
            if idx.size == 0:
                break
            sub = replica_draws(model, budget, rep_tag, indices=[h + attempt * budget.H for h in idx])
            redo = model.estimate_replicas(theta, sub)
            ok = np.all(np.isfinite(redo), axis=1)
            est[idx[ok]] = redo[ok]
            bad[idx[ok]] = False
            failures += int((~ok).sum())
    if np.all(bad):
        raise SurrogateFailure(f"all {budget.H} replica estimates failed")
    return est, failures


def _mean_rows(est):
    ok = np.all(np.isfinite(est), axis=1)
    # fixed summation order over h
    return est[ok].sum(axis=0) / ok.sum()


def surrogate_pi(model, theta, budget, rep_tag=0, draws=None):
    """Simulated expectation of the estimator at ``theta``.

    With ``budget.use_exact_pi`` the model's closed form is returned instead.
    """
    theta = np.asarray(theta, dtype=float)
    if budget.use_exact_pi:
        if not model.has_exact_pi:
            raise ValueError(f"{type(model).__name__} has no exact expectation")
        return np.asarray(model.exact_pi(theta), dtype=float)
    est, _ = replica_estimates(model, theta, budget, rep_tag, draws)
    return _mean_rows(est)


def solve_fixed_point(model, theta_tilde, budget, bounds=None, rep_tag=0):
    """Iterate ``theta <- project(T(theta))`` from ``theta_tilde``.

    Stops when the sup-norm displacement falls below the relative tolerance or
    after ``budget.max_iter`` steps.  Non-convergence is reported through
    ``IBResult.converged``; a surrogate failure raises ``SolverFailure`` with
    the partial trace attached.
    """
    theta_tilde = np.asarray(theta_tilde, dtype=float).reshape(-1)
    if theta_tilde.size != model.dim:
        raise ValueError(f"theta_tilde has length {theta_tilde.size}, model dimension is {model.dim}")
    if not np.all(np.isfinite(theta_tilde)):
        raise ValueError("theta_tilde must be finite")
    if bounds is None:
        bounds = model.default_bounds()

    theta, clamped = project_to_domain(theta_tilde, bounds)
    result = IBResult(theta_hat=theta, iterates=[theta.copy()], clamped=clamped)
    draws = None
    if not budget.use_exact_pi:
        draws = replica_draws(model, budget, rep_tag)

    for _ in range(budget.max_iter):
        try:
            if budget.use_exact_pi:
                pi_k = surrogate_pi(model, theta, budget, rep_tag)
            else:
                est, failed = replica_estimates(model, theta, budget, rep_tag, draws)
                result.failures += failed
                pi_k = _mean_rows(est)
        except SurrogateFailure as exc:
            raise SolverFailure(f"surrogate failed at iteration {result.iterations}: {exc}", result) from exc
        theta_next, hit = project_to_domain(ib_step(theta, theta_tilde, pi_k), bounds)
        result.clamped |= hit
        step = float(np.max(np.abs(theta_next - theta)))
        result.iterates.append(theta_next.copy())
        result.residuals.append(step)
        result.iterations += 1
        theta = theta_next
        if step <= budget.tol * (1.0 + float(np.max(np.abs(theta)))):
            result.converged = True
            break
    result.theta_hat = theta
    if not result.converged:
        log.debug("fixed point not reached after %d iterations (last step %.3g)", result.iterations, result.residuals[-1])
    return result
