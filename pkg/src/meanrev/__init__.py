"""Mean-reversion portfolio construction and backtesting."""

from .errors import (
    DataRangeError,
    DuplicateRowError,
    InsufficientDataError,
    MeanRevError,
    NoSignalError,
    NonConvergenceError,
    NotPositiveDefiniteError,
    ParseError,
    RankDeficiencyError,
    UndefinedStatisticError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DataRangeError",
    "DuplicateRowError",
    "InsufficientDataError",
    "MeanRevError",
    "NoSignalError",
    "NonConvergenceError",
    "NotPositiveDefiniteError",
    "ParseError",
    "RankDeficiencyError",
    "UndefinedStatisticError",
    "ValidationError",
]
