""" Errors raised by asyncpqp. """


class AsyncPQPError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(AsyncPQPError, ValueError):
    """Invalid configuration file or field value."""


class SingularBlockError(AsyncPQPError):
    """Factorization of a block's Q_i failed, the block is not SPD."""


class SingularAggregateError(AsyncPQPError):
    """The aggregate curvature sum(Phi_i) is numerically singular.

    The stationary dual point is then not unique and the instance must be
    rejected.
    """


class UnstableInstanceError(AsyncPQPError):
    """The synchronous iteration matrix has spectral radius >= 1."""


class _RunError(AsyncPQPError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class DivergenceError(_RunError):
    """The dual iterate blew past the overflow guard."""


class StallError(_RunError):
    """The stabilizing gate held for more consecutive steps than allowed."""


class ModeOverflowError(AsyncPQPError, OverflowError):
    """Too many switching modes (or too large a lift) to materialize."""


class ConvergenceError(AsyncPQPError):
    """An iterative eigenvalue computation did not converge."""


class ExportError(AsyncPQPError):
    """Reading or writing run data failed."""
