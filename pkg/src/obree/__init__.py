"""Simulation-based bias reduction by the iterative bootstrap.

The estimator is the fixed point of ``T(theta) = theta_tilde - (pi_star(theta) - theta)``
where ``pi_star`` is the average of the initial estimator over simulated
samples drawn with common random numbers.  See ``obree.core`` for the solver
and ``obree.harness`` for Monte Carlo experiments.
"""

__version__ = "0.1.0"

from .core import (
    DomainBounds,
    IBResult,
    SimulableModel,
    SimulationBudget,
    ib_step,
    solve_fixed_point,
    surrogate_pi,
)
from .errors import ConfigError, EstimationError, SolverFailure, SurrogateFailure
from .rng import RandomStream, StreamKey, derive_stream

__all__ = [
    "__version__",
    "ConfigError",
    "DomainBounds",
    "EstimationError",
    "IBResult",
    "RandomStream",
    "SimulableModel",
    "SimulationBudget",
    "SolverFailure",
    "StreamKey",
    "SurrogateFailure",
    "derive_stream",
    "ib_step",
    "solve_fixed_point",
    "surrogate_pi",
]
