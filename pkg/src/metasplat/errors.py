"""Exception types raised across the package."""


class MetasplatError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(MetasplatError):
    """Array arguments disagree in shape."""


class LayoutMismatch(MetasplatError):
    """A flat parameter vector does not match the expected scene layout."""


class DegenerateQuaternion(MetasplatError):
    """A raw quaternion has norm too small to normalize (<= 1e-8)."""


class IoFailure(MetasplatError):
    """A file could not be read or written."""


class FormatVersionMismatch(IoFailure):
    """A binary file declares an unsupported format version."""


class CorruptHeader(IoFailure):
    """A binary file header is truncated or carries the wrong magic."""


class BadDirection(MetasplatError):
    """A view direction is not unit length."""


class StaleAux(MetasplatError):
    """Backward-pass aux data does not match the given scene/camera."""


class BadRange(MetasplatError):
    """An integer sampling range is empty or inconsistent."""


class EmptyAnchorSet(MetasplatError):
    """No anchor steps fit inside the refinement horizon."""


class BadStride(MetasplatError):
    """Pixel sampling stride must be a positive integer."""


class NonFiniteLoss(MetasplatError):
    """A loss evaluated to NaN/Inf; carries the offending step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonFiniteHvp(MetasplatError):
    """A finite-difference Hessian-vector product produced NaN/Inf."""


class TooLarge(MetasplatError):
    """Problem size exceeds what the exact-oracle path supports."""


class BadConfig(MetasplatError):
    """A configuration value or key is invalid."""
