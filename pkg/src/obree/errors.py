"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending key path."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class EstimationError(RuntimeError):
    """An estimator could not produce a finite estimate (separation, rank loss, ...)."""


class SurrogateFailure(RuntimeError):
    """Every replica failed, or the abort policy hit a failed replica."""


class SolverFailure(RuntimeError):
    """The fixed-point solver stopped on a surrogate failure; ``result`` holds the trace."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
