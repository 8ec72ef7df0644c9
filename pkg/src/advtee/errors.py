"""Exception types raised across the package."""


class AdvTeeError(Exception):
    """Base class for all package errors."""


class DegenerateQuad(AdvTeeError, ValueError):
    pass


class DegeneratePolygon(AdvTeeError, ValueError):
    pass


class DimensionMismatch(AdvTeeError, ValueError):
    pass


class MissingTexture(AdvTeeError, ValueError):
    pass


class NonDivisibleTarget(AdvTeeError, ValueError):
    pass


class IoFailure(AdvTeeError, OSError):
    pass


class ShapeMismatch(AdvTeeError, ValueError):
    pass


class OutOfRangeCoordinate(AdvTeeError, ValueError):
    pass


class EmptyPalette(AdvTeeError, ValueError):
    pass


class UnknownArchitecture(AdvTeeError, ValueError):
    pass


class AdapterFailure(AdvTeeError, RuntimeError):
    pass


class ConvergenceFailure(AdvTeeError, RuntimeError):
    pass


class SchemaViolation(AdvTeeError, ValueError):
    pass


class MissingImageFile(AdvTeeError, FileNotFoundError):
    pass


class NonFiniteLoss(AdvTeeError, FloatingPointError):
    pass


class ConfigError(AdvTeeError, ValueError):
    """Invalid run configuration; ``key`` names the offending field."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NoMatchedCandidates(UserWarning):
    """Batch had no detector candidate matched to a person box."""
