"""Exception types shared across the package."""


class HeightBEVError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(HeightBEVError, ValueError):
    """A point lies on or behind the camera plane."""


class InvalidCamera(HeightBEVError, ValueError):
    pass


class InvalidQuery(HeightBEVError, ValueError):
    pass


class OutOfRange(HeightBEVError, IndexError):
    pass


class GridMismatch(HeightBEVError, ValueError):
    pass


class ShapeMismatch(HeightBEVError, ValueError):
    pass


class NonFiniteLoss(HeightBEVError, FloatingPointError):
    pass


class NonFiniteGradient(HeightBEVError, FloatingPointError):
    pass


class DivergenceDetected(HeightBEVError, FloatingPointError):
    pass


class PlacementFailure(HeightBEVError, RuntimeError):
    """Rejection sampling could not place all boxes."""


class NoMatches(HeightBEVError, ValueError):
    pass


class DataError(HeightBEVError, ValueError):
    """Malformed input file."""
