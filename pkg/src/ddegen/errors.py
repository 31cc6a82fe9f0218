"""Exception hierarchy shared by the library and the CLI."""


class DdeError(Exception):
    """Base class for all library errors."""

    exit_code = 3


class ConfigError(DdeError, ValueError):
    """Invalid configuration, dimension mismatch or unknown option."""

    exit_code = 2


class ContractError(DdeError, ValueError):
    """An operation was called outside its preconditions."""

    exit_code = 2


class ModelKindError(DdeError, TypeError):
    """A model of the wrong kind was passed, e.g. a generator where a DDE is needed."""

    exit_code = 2


class NumericError(DdeError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``node`` identifies the offending graph node or stage when known.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ParseError(DdeError, ValueError):
    """Malformed input file."""

    exit_code = 2

    def __init__(self, message, row=None, col=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", col {col})" if col is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.col = col


class EstimationError(DdeError):
    """A Monte-Carlo estimate could not be formed."""
