"""Exception hierarchy shared by every module of the package."""


class RetroConvError(Exception):
    """Base class for all package errors."""


class DimensionError(RetroConvError, ValueError):
    """Zero, negative or overflowing tensor dimensions."""


class ShapeError(RetroConvError, ValueError):
    """Operands whose shapes do not agree with an operation's contract."""


class TemporalLengthError(ShapeError):
    """Clip too short along the time axis."""


class ConfigError(RetroConvError, ValueError):
    """Invalid model, sampler or run configuration."""


class GraphError(RetroConvError):
    """Failure inside an operator graph; the message names the node."""


class StateError(RetroConvError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class SpecError(RetroConvError, ValueError):
    """A synthetic scene description that cannot be rendered."""


class SamplingError(RetroConvError, ValueError):
    """Not enough frames to build a clip."""


class NumericAbort(RetroConvError, FloatingPointError):
    """Non-finite loss or gradient during training."""


class FormatError(RetroConvError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (at byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimMismatchError(FormatError):
    pass
