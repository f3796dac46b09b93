"""Exception types shared across the package."""


class QTrackError(Exception):
    """Base class for all package errors."""


class UsageError(QTrackError, ValueError):
    """Invalid arguments, dimensions or configuration."""


class DegenerateUpdateError(QTrackError, ArithmeticError):
    """Raised when the trace of an unnormalized update collapses.

    Attributes
    ----------
    step : int or None
        Index of the measurement increment at which the update broke down.
    trace : float
        Offending trace value.
    """

    def __init__(self, message, step=None, trace=float("nan")):
        super().__init__(message)
        self.step = step
        self.trace = trace


class PositivityError(QTrackError, ArithmeticError):
    """Strict mode only: a state lost positivity beyond tolerance."""

    def __init__(self, message, step=None, min_eigenvalue=float("nan")):
        super().__init__(message)
        self.step = step
        self.min_eigenvalue = min_eigenvalue


class ConfigError(UsageError):
    """Configuration file problem, addressed by field (and line when known)."""

    def __init__(self, message, field=None, line=None):
        where = ""
        if field is not None:
            where += f"[{field}] "
        if line is not None:
            where += f"(line {line}) "
        super().__init__(where + message)
        self.field = field
        self.line = line
