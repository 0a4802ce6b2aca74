"""Scalar models whose estimator expectation is known in closed form.

=============  ======================  ==================  =================
id             data                    estimator           expectation
=============  ======================  ==================  =================
normal_mean    N(theta, 1)             sample mean         theta
exp_rate       Exp(rate=theta)         n / sum(x)          theta n / (n - 1)
unif_max       U(0, theta)             max(x)              theta n / (n + 1)
=============  ======================  ==================  =================

Data are built from fixed stream draws by a smooth transform in theta, so the
simulated expectation is a deterministic function of theta.
"""

from __future__ import annotations

import numpy as np

from .core import DomainBounds, SimulableModel
from .errors import EstimationError

__all__ = ["TOY_IDS", "ToyModel", "toy_simulate", "toy_transform", "toy_estimate", "toy_exact_pi"]

TOY_IDS = ("normal_mean", "exp_rate", "unif_max")


def _check_id(toy_id):
    if toy_id not in TOY_IDS:
        raise ValueError(f"unknown toy model {toy_id!r}; expected one of {TOY_IDS}")


def _draw(toy_id, n, stream):
    if toy_id == "normal_mean":
        return stream.normal(n)
    return stream.uniform(n)


def toy_transform(toy_id, theta, draws):
    """Map fixed draws (normals for normal_mean, uniforms otherwise) to a sample."""
    _check_id(toy_id)
    draws = np.asarray(draws, dtype=float)
    if toy_id == "normal_mean":
        return theta + draws
    if theta <= 0:
        raise ValueError(f"{toy_id} needs theta > 0")
    if toy_id == "exp_rate":
        return -np.log(draws) / theta
    return theta * draws


def toy_simulate(toy_id, theta, n, stream):
    _check_id(toy_id)
    if n < 1:
        raise ValueError("n must be at least 1")
    return toy_transform(toy_id, float(theta), _draw(toy_id, n, stream))


def toy_estimate(toy_id, sample):
    """Closed-form estimator for one sample (or row-wise for a 2-d stack)."""
    _check_id(toy_id)
    sample = np.asarray(sample, dtype=float)
    if sample.shape[-1] == 0:
        raise EstimationError("empty sample")
    if toy_id == "normal_mean":
        return sample.mean(axis=-1)
    if toy_id == "exp_rate":
        total = sample.sum(axis=-1)
        if np.any(total <= 0):
            raise EstimationError("exp_rate estimator needs a positive sample sum")
        return sample.shape[-1] / total
    return sample.max(axis=-1)


def toy_exact_pi(toy_id, theta, n):
    _check_id(toy_id)
    if toy_id == "normal_mean":
        return theta
    if toy_id == "exp_rate":
        if n < 2:
            raise ValueError("exp_rate expectation is finite only for n >= 2")
        return theta * n / (n - 1)
    return theta * n / (n + 1)


class ToyModel(SimulableModel):
    """One of the closed-form toys as a ``SimulableModel`` (dimension 1)."""

    dim = 1

    def __init__(self, toy_id, n):
        _check_id(toy_id)
        if toy_id == "exp_rate" and n < 2:
            raise ValueError("exp_rate needs n >= 2")
        self.toy_id = toy_id
        self.n = int(n)

    def __repr__(self):
        return f"ToyModel({self.toy_id!r}, n={self.n})"

    def draw(self, stream):
        return _draw(self.toy_id, self.n, stream)

    def generate(self, theta, draws):
        return toy_transform(self.toy_id, float(np.asarray(theta).reshape(-1)[0]), draws)

    def estimate(self, data):
        return np.atleast_1d(toy_estimate(self.toy_id, data))

    def estimate_replicas(self, theta, draws):
        samples = self.generate(theta, np.asarray(draws))
        return np.asarray(toy_estimate(self.toy_id, samples), dtype=float).reshape(-1, 1)

    def exact_pi(self, theta):
        return np.atleast_1d(toy_exact_pi(self.toy_id, float(np.asarray(theta).reshape(-1)[0]), self.n))

    def default_bounds(self):
        if self.toy_id == "normal_mean":
            return DomainBounds([-1e6], [1e6])
        return DomainBounds([1e-8], [1e8])
