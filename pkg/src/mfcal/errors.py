"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class MfcalError(Exception):
    exit_code = 1


class ConfigError(MfcalError):
    exit_code = 3


class DataError(MfcalError):
    exit_code = 4


class SchemaError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class DegenerateColumnError(DataError):
    def __init__(self, column):
        super().__init__(f"column {column!r} has zero variance")
        self.column = column


class SplitError(DataError):
    pass


class EncodingError(DataError):
    pass


class DomainError(DataError):
    """A log argument in an analytic source is nonpositive."""

    def __init__(self, source, x, theta):
        super().__init__(
            f"nonpositive log argument for source {source!r} at x={x!r}, theta={tuple(theta)!r}"
        )
        self.source = source
        self.x = x
        self.theta = tuple(theta)


class GenerationError(DataError):
    pass


class NumericError(MfcalError):
    exit_code = 5

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class ContractError(MfcalError, ValueError):
    """A caller broke an operation's precondition."""
