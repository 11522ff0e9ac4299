"""Shared exception types.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2.
"""


class SusmapError(Exception):
    """Base class for all toolkit errors."""


class UsageError(SusmapError):
    """Bad command-line arguments or inconsistent configuration."""


class DataError(SusmapError):
    """Missing, malformed, or inconsistent input data."""
