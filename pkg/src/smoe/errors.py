"""Exception types shared across the package."""


class SmoeError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(SmoeError):
    """Two rasters or a model/raster pair disagree on width or height."""


class ModelEmpty(SmoeError):
    """An evaluation was requested on a model with no kernels."""


class ParseError(SmoeError):
    """A model or image file is malformed.

    Carries the 1-based line (or byte offset description) where parsing
    failed, when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvalidThresholds(SmoeError):
    """Edge-detector hysteresis thresholds are out of order or nonpositive."""


class CenterOutOfBounds(SmoeError):
    """A kernel center falls outside the image it should sample."""


class EmptyEdgeMask(SmoeError):
    """Edge analysis produced no usable line segments."""


class TileTooSmall(SmoeError):
    """Requested tile size is below the supported minimum."""


class CoverageGap(SmoeError):
    """Tiles handed to the merge step do not tile the target frame exactly."""


class NonFiniteLoss(SmoeError):
    """Training encountered a NaN or infinite objective value."""


class ImageTooSmall(SmoeError):
    """An image is smaller than the metric's window."""
