"""Exception and warning types raised across the package."""


class WflowError(Exception):
    """Base class for all package errors."""


class DomainError(WflowError, ValueError):
    """A kernel or function was evaluated outside its domain."""


class GridError(WflowError, ValueError):
    """Two objects do not share a grid, or a grid is too small."""


class MassDegeneracyError(WflowError, ArithmeticError):
    """A mass value is non-positive."""


class DegenerateQuantileError(WflowError, ValueError):
    """A quantile vector is not strictly increasing where it must be."""


class NumericalBlowupError(WflowError, ArithmeticError):
    """The time stepper produced non-finite values."""


class MonotonicityViolation(WflowError, ArithmeticError):
    """A path lost monotonicity while running with ``monotone_repair='reject'``."""


class IllConditionedInversion(WflowError, ArithmeticError):
    """Dividing by the spectral kernel would hit the underflow floor."""


class ConfigError(WflowError, ValueError):
    """Invalid run configuration."""


class DivergenceError(WflowError, RuntimeError):
    """Fixed-point iteration did not converge."""

    def __init__(self, message, gaps=None):
        super().__init__(message)
        self.gaps = list(gaps or [])


class InsufficientEnsembleWarning(UserWarning):
    """Ensemble too small for histogram statistics to be meaningful."""


class NovikovBoundWarning(UserWarning):
    """The running integral of |h|^2 exceeded its declared bound."""
