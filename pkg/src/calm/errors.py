"""Exception types raised across the package."""


class CalmError(Exception):
    """Base class for all package errors."""


class ParseError(CalmError):
    """Input could not be parsed; ``row`` is the 0-based data row when known."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(message)


class DomainError(CalmError, ValueError):
    """An input violates a mathematical or structural precondition."""


class MissingPredictionError(CalmError, KeyError):
    """A counterfactual prediction was requested but is not available."""

    def __init__(self, key):
        self.key = key
        super().__init__(f"missing prediction for {key!r}")

    def __str__(self):
        return self.args[0]


class RemoteError(CalmError):
    """Transport or protocol failure talking to a remote predictor."""

    def __init__(self, message, retryable=False):
        self.retryable = retryable
        super().__init__(message)


class OutOfSupportError(DomainError):
    """A kernel query point has no mass under the sample."""


class UnstableQueryError(DomainError):
    """A kernel query point has too small an effective sample size."""


class HarnessError(CalmError):
    """Too many Monte Carlo replications failed."""
