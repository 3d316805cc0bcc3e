"""Exception hierarchy shared across the package.

The CLI maps each family to a distinct exit code.
"""


class JobValuesError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ContractError(JobValuesError, ValueError):
    """Inputs violate an operation's preconditions (shapes, ranges)."""

    exit_code = 2


class ConfigurationError(JobValuesError, ValueError):
    exit_code = 3


class DataError(JobValuesError, ValueError):
    """Malformed input data such as overlapping spells."""

    exit_code = 4


class NumericalError(JobValuesError, ArithmeticError):
    """An iterative routine failed to converge or hit a degenerate state."""

    exit_code = 5

    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace if trace is not None else []


class IdentificationError(NumericalError):
    """Flow data do not pin down the requested parameters."""
