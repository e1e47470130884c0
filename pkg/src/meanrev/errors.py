"""Exception hierarchy shared by all meanrev modules."""


class MeanRevError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MeanRevError, ValueError):
    """Input violates a documented invariant."""


class ParseError(ValidationError):
    """Malformed input file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DuplicateRowError(ParseError):
    """The same (ticker, date) key appears twice."""


class DataRangeError(MeanRevError, IndexError):
    """A requested date index lies outside the panel."""


class InsufficientDataError(MeanRevError):
    """Not enough observations to perform a computation."""


class RankDeficiencyError(MeanRevError, ValueError):
    """A regression or constraint system has linearly dependent columns."""

    def __init__(self, message, dependent=()):
        self.dependent = tuple(dependent)
        if self.dependent:
            message = f"{message}; dependent columns: {', '.join(map(str, self.dependent))}"
        super().__init__(message)


class NotPositiveDefiniteError(MeanRevError, ValueError):
    """A covariance matrix expected to be positive-definite is not."""


class NoSignalError(MeanRevError, ValueError):
    """All residuals vanish, so there is nothing to trade."""


class UndefinedStatisticError(MeanRevError, ValueError):
    """A performance statistic is undefined for the given data."""


class NonConvergenceError(MeanRevError, RuntimeError):
    """An iterative solver hit its iteration cap.

    ``state`` carries the last iterate so callers can inspect or dump it.
    """

    def __init__(self, message, state=None):
        self.state = state
        super().__init__(message)
