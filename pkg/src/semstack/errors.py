"""Exception hierarchy shared by every module."""


class SemstackError(Exception):
    """Base class; the CLI maps subclasses to error categories."""

    category = "error"


class ConfigError(SemstackError, ValueError):
    category = "config"


class ShapeError(SemstackError, ValueError):
    category = "shape"


class StateError(SemstackError, RuntimeError):
    category = "state"


class NonFiniteError(SemstackError, FloatingPointError):
    category = "numeric"


class EmptyDatasetError(SemstackError, ValueError):
    category = "data"


class UndefinedMetricError(SemstackError, ValueError):
    category = "metric"


class FormatError(SemstackError, ValueError):
    """Malformed binary artifact. ``offset`` points at the offending byte when known."""

    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ArtifactMismatchError(SemstackError):
    category = "artifact"
