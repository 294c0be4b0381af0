"""Exception taxonomy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, DataError -> 3,
DependencyError -> 4, numeric failures (DegenerateGeometryError,
OptimizationError, InvariantViolationError) -> 5.
"""


class RestposeError(Exception):
    """Base class for all package errors."""


class ConfigError(RestposeError):
    """Invalid configuration or invalid parameter values."""


class DimensionError(RestposeError):
    """Array shape or size mismatch."""


class EmptyInputError(RestposeError):
    """An operation received an empty collection."""


class FormatError(RestposeError):
    """A file does not follow its documented container format."""


class DataError(RestposeError):
    """Dataset contents missing or malformed."""


class DependencyError(RestposeError):
    """A required prior artifact (e.g. a lower-level checkpoint) is missing."""


class DegenerateGeometryError(RestposeError):
    """A geometric configuration is rank-deficient (e.g. collinear points)."""


class OptimizationError(RestposeError):
    """The optimizer produced a non-finite objective."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class InvariantViolationError(RestposeError):
    """A runtime contract was broken (e.g. a frozen model changed)."""
