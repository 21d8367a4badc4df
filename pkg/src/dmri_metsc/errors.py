"""Exception hierarchy for dmri-metsc.

Each error carries the process exit code the command-line front end reports for it.
"""


class MetscError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1

    def __init__(self, message: str, exit_code: int | None = None):
        super().__init__(message)
        if exit_code is not None:
            self.exit_code = exit_code


class UsageError(MetscError):
    """Bad command-line usage or an unknown enumerated name."""

    exit_code = 2


class ConfigurationError(MetscError, ValueError):
    """Inconsistent configuration (overlapping grids, unnormalized quadrature, ...)."""

    exit_code = 2


class ParameterError(MetscError, ValueError):
    """A scalar argument outside its valid domain."""

    exit_code = 2


class DimensionError(MetscError, ValueError):
    """Tensor or array shapes do not compose."""

    exit_code = 2


class DataError(MetscError):
    """Input data is unreadable or inconsistent."""

    exit_code = 3


class ParseError(DataError):
    """A text or sidecar file could not be parsed."""


class SchemeMismatchError(DataError):
    """Volume, dictionary or checkpoint were built for different acquisition schemes."""


class NumericalError(MetscError):
    """Non-finite values or a failed numerical procedure."""

    exit_code = 4


class DivergenceError(NumericalError):
    """An iterative solver's iterate norm grew without bound."""
