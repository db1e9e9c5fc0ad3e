"""Exception hierarchy shared by every module."""


class ILTError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(ILTError):
    """A file or polygon description could not be parsed."""


class ValidationError(ILTError):
    """A value violates a documented invariant."""


class DimensionError(ILTError):
    """Array or grid shapes are incompatible."""


class OutOfBoundsError(ILTError):
    """Geometry falls outside the raster grid."""


class ConfigError(ILTError):
    """A configuration value is missing or invalid."""


class DivergenceError(ILTError):
    """The optimizer produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []
