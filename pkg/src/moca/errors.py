"""Exception types shared across the pipeline.

The CLI maps these onto its exit-code contract: usage errors exit 1,
DataError (and plain ValueError/OSError) exit 2, NumericalError exit 3.
"""


class MocaError(Exception):
    """Base class for all pipeline errors."""


class DataError(MocaError):
    """Malformed, missing, or semantically invalid input data."""


class NumericalError(MocaError):
    """Non-finite values or a failed numerical check."""
