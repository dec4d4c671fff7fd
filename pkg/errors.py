"""
Exception hierarchy for the depth completion toolkit.
"""
from typing import Optional


class DepthFuseError(Exception):
    """Base class for every error raised by this package"""
    pass


class ShapeError(DepthFuseError):
    """Tensor shapes disagree; `dimension` names the offending axis"""

    def __init__(self, message: str, dimension: Optional[int] = None):
        super().__init__(message)
        self.dimension = dimension


class GraphError(DepthFuseError):
    """Misuse of the autodiff graph (non-scalar backward, consumed graph)"""
    pass


class MissingGradientError(DepthFuseError):
    pass


class MaskError(DepthFuseError):
    """Observation mask is not strictly binary"""
    pass


class MaskMismatchError(DepthFuseError):
    """Sparse depth carries values where the mask says nothing was observed"""
    pass


class EmptySelectionError(DepthFuseError):
    """No valid pixels to work with (loss, metric, band or sampler)"""
    pass


class ConfigError(DepthFuseError):
    pass


class ImageFormatError(DepthFuseError):
    """Malformed or truncated PPM/PFM file"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(DepthFuseError):

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CheckpointError(DepthFuseError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptRecordError(CheckpointError):
    """A checkpoint record failed its CRC32 check"""

    def __init__(self, message: str, record: str):
        super().__init__(f"{message} (record '{record}')")
        self.record = record


class NonFiniteLossError(DepthFuseError):

    def __init__(self, iteration: int, parameter: str, magnitude: float, loss: float):
        super().__init__(
            f"Non-finite loss {loss} at iteration {iteration}; "
            f"largest parameter magnitude {magnitude:.3e} in '{parameter}'"
        )
        self.iteration = iteration
        self.parameter = parameter
        self.magnitude = magnitude


class InvalidGroundTruthError(DepthFuseError):
    """Ground truth depth is not positive at a pixel marked valid"""
    pass
