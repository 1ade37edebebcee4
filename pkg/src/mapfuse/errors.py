"""Exception hierarchy shared across the package."""


class MapfuseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MapfuseError, ValueError):
    """Invalid configuration value (non-positive voxel size, bad tile size, ...)."""


class DataError(MapfuseError, ValueError):
    """Input data violates a documented precondition or invariant."""


class DecodeError(DataError):
    """Malformed or truncated binary file; the message names the failing offset."""


class ShapeError(MapfuseError, ValueError):
    """Array dimensions do not chain or do not match the declared layout."""


class AlignmentError(ShapeError):
    """Feature grids passed together do not share the same key set."""


class NumericError(MapfuseError, ArithmeticError):
    """A numeric check failed (non-finite loss, gradient error above tolerance)."""


class InvalidTransformError(DataError):
    """Rotation matrix is not orthonormal with determinant +1."""


class DegenerateRotationError(DataError):
    """Rotation input has a zero-norm or parallel column pair."""


class InsufficientSupportError(DataError):
    """Too few points to estimate a surface element."""


class DegenerateGeometryError(DataError):
    """Point set has no unique smallest covariance eigenvalue."""
