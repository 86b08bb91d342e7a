"""Exception hierarchy shared by every service.

The CLI maps ``UsageError`` to exit code 1 and ``DataError`` to exit code 2.
"""

from typing import Optional


class GQEError(Exception):
    """Base class for all errors raised by the package."""


class UsageError(GQEError):
    """Invalid flag, configuration value or precondition supplied by the caller."""


class DataError(GQEError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """Bad magic, header, version or truncated payload."""


class DimensionError(DataError):
    """Embedding dimension or tensor shape mismatch."""


class NonFiniteError(DataError):
    """NaN or infinite value in data, encoder output or gradients."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name


class ZeroVectorError(DataError):
    """A vector that must be normalized has zero length."""


class StaleCacheError(DataError):
    """A cached graph or level store does not match its inputs."""


class LabelError(DataError):
    """Missing, malformed or insufficient labels."""


class EmptyNeighborhoodError(DataError):
    """An expansion was asked to aggregate an empty neighbor list."""


class PoolExhaustedError(DataError):
    """The negative pool holds fewer candidates than requested."""


class MissingTraceError(DataError):
    """Weight attribution reached a node without a recorded aggregation."""


class ZeroWeightError(DataError):
    """Agreement or Diversity requested over weights that sum to zero."""
