"""Exception hierarchy shared across the package.

The CLI maps each family to an exit code: validation problems exit with 2,
solver failures with 3 and inconsistent logged data with 4.
"""


class ReviewEvalError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(ReviewEvalError, ValueError):
    """Input documents or arguments violate a schema or invariant."""

    exit_code = 2

    def __init__(self, message, row=None, source=None):
        self.row = row
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if row is not None:
            where += f" row {row}" if where else f"row {row}"
        super().__init__(f"{where}: {message}" if where else message)


class SolverError(ReviewEvalError, RuntimeError):
    """A linear program could not be solved."""

    exit_code = 3


class InfeasibleError(SolverError):
    """The linear program has no feasible point."""


class UnboundedError(SolverError):
    """The linear program objective is unbounded."""


class DataInconsistencyError(ReviewEvalError):
    """Logged data contradicts the claimed policies or itself."""

    exit_code = 4


class SamplingError(ReviewEvalError, RuntimeError):
    """The dependent-rounding sampler hit an impossible state (corrupt input)."""

    exit_code = 4
