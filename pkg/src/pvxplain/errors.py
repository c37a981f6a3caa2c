"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (2 usage, 3 data, 4 numeric),
and the HTTP service maps them onto 4xx responses.
"""


class PvxplainError(Exception):
    """Base class for all package errors."""


class UsageError(PvxplainError):
    """Invalid option combination or argument value."""


class DataError(PvxplainError):
    """Malformed, missing, or unusable input data."""


class NumericError(PvxplainError):
    """Numeric failure (non-finite values, undefined statistics)."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
