"""Exception types shared across the package."""


class MonoPHError(Exception):
    """Base class for all package errors."""


class ShapeError(MonoPHError, ValueError):
    """Operands have incompatible layouts or dimensions."""


class UsageError(MonoPHError, ValueError):
    """An operation was called in a context it does not support."""


class SolverError(MonoPHError, RuntimeError):
    """A linear factorization or solve failed numerically."""


class ConvergenceError(MonoPHError, RuntimeError):
    """An iterative method hit its iteration cap.

    The last residual is kept on ``residual`` so callers can decide
    whether the partial result is still useful.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceError(MonoPHError, FloatingPointError):
    """Non-finite values appeared while integrating a flow."""

    def __init__(self, message, step=-1):
        super().__init__(message)
        self.step = step


class UnsupportedError(MonoPHError, NotImplementedError):
    """The requested method is not available for this problem class."""


class ConfigError(MonoPHError, ValueError):
    """A run configuration failed to parse or validate."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
