"""Exception types shared across the package."""


class RankScoreError(Exception):
    """Base class for every error this package raises on purpose."""


class ConvergenceError(RankScoreError, RuntimeError):
    """A solver hit its iteration budget without meeting its tolerances.

    Carries the final residual norms and iteration count for diagnosis.
    """

    def __init__(self, message, iterations=None, primal_residual=None,
                 dual_residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual


class DualUnboundedError(RankScoreError, RuntimeError):
    """The l1-penalized quadratic dual descends below its objective floor.

    This signals that the box-constraint tuning parameter is too small
    for the problem at hand.
    """


class EstimationError(RankScoreError, RuntimeError):
    """A component failure inside the full estimation pipeline.

    The message carries the treatment arm and quantile level where the
    failure occurred; the original exception is chained.
    """


class DataError(RankScoreError, ValueError):
    """Malformed input data (CSV parsing, shape or domain violations)."""
