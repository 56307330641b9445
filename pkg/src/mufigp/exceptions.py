"""Exception hierarchy shared by all modules."""


class MufigpError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(MufigpError, ValueError):
    """Array arguments have incompatible shapes."""


class ConditioningError(MufigpError, ArithmeticError):
    """A covariance matrix could not be factorized, even after jitter escalation."""


class FitError(MufigpError):
    """Every optimizer restart failed.

    ``diagnostics`` holds whatever partial information was collected (best
    objective value seen, failure messages per restart).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NestingError(MufigpError, ValueError):
    """Training designs are not nested although the method requires it."""

    def __init__(self, message, level=None, rows=()):
        super().__init__(message)
        self.level = level
        self.rows = tuple(rows)


class ConfigurationError(MufigpError, ValueError):
    """Inconsistent or missing configuration."""


class StateError(MufigpError, RuntimeError):
    """Operation requested on an object in the wrong state (e.g. unfitted)."""


class DivergenceError(MufigpError, ArithmeticError):
    """Variational training produced a non-finite objective."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class DegeneratePredictionError(MufigpError, ValueError):
    """Predictions with zero standard deviation cannot be calibrated."""


class DataError(MufigpError, ValueError):
    """Base class for problems with files on disk."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class SchemaError(DataError):
    """File parsed but violates the dataset or model schema."""


class VersionError(DataError):
    """File carries an unsupported ``format_version``."""


class DomainError(MufigpError, ValueError):
    """Point outside the domain of a benchmark function."""


class OracleError(MufigpError, RuntimeError):
    """An oracle (simulator) call failed during adaptive sampling."""
