"""Exception types shared across the package."""


class MagjointError(Exception):
    """Base class for all package errors."""


class DegenerateSixD(MagjointError, ValueError):
    """A 6D rotation vector cannot be orthonormalized."""


class EstimationFailed(MagjointError):
    """A model produced an output that does not decode to a rotation."""


class TooCloseToSource(MagjointError, ValueError):
    """Field query point lies on top of a dipole source."""


class ShapeMismatch(MagjointError, ValueError):
    pass


class DimensionMismatch(MagjointError, ValueError):
    pass


class StatsMismatch(MagjointError):
    """Model and dataset were standardized with different statistics."""


class FormatVersionError(MagjointError):
    """An artifact file was written by an incompatible format version."""
