"""
Typed errors raised by flowhmm.

Every error derives from FlowHmmError and from the closest builtin exception, so callers can
catch either ``FlowHmmError`` or e.g. ``ValueError``.
"""

from typing import Optional


class FlowHmmError(Exception):
    """Base class for all flowhmm errors."""


class ShapeError(FlowHmmError, ValueError):
    """Array shapes or dimensions do not match."""


class DataError(FlowHmmError, ValueError):
    """Input data cannot be processed (empty, too short, silent, ...)."""


class ConfigurationError(FlowHmmError, ValueError):
    """Invalid configuration value."""


class NumericalError(FlowHmmError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(
        self,
        message: str,
        *,
        layer: Optional[int] = None,
        state: Optional[int] = None,
        component: Optional[int] = None,
        frame: Optional[int] = None,
    ) -> None:
        context = [
            f"{name}={value}"
            for name, value in (
                ("layer", layer),
                ("state", state),
                ("component", component),
                ("frame", frame),
            )
            if value is not None
        ]
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.layer = layer
        self.state = state
        self.component = component
        self.frame = frame


class SingularMatrixError(NumericalError):
    """An invertible 1x1 convolution became (numerically) singular."""


class ModelFormatError(FlowHmmError, ValueError):
    """A persisted file is malformed."""


class VersionMismatchError(ModelFormatError):
    """A persisted file was written with an unsupported format version."""


class CorruptFileError(ModelFormatError):
    """A persisted file has a bad magic number or inconsistent contents."""


class TruncatedFileError(CorruptFileError):
    """A persisted file ended before its declared payload."""
