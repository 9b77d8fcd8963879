"""Error taxonomy shared across the pipeline.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
anything else -> 3.
"""


class CardiotypeError(Exception):
    """Base class for errors raised by this package."""


class UsageError(CardiotypeError):
    """Bad flag combinations or invalid user-supplied parameter values."""


class DataError(CardiotypeError):
    """On-disk data is missing, malformed, or inconsistent."""
