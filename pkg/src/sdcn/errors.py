"""Exception hierarchy shared by every module."""


class SdcnError(Exception):
    """Base class for all library errors."""


class ShapeError(SdcnError, ValueError):
    """Array dimensions do not match what an operation expects."""


class StateError(SdcnError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class PoisonedStateError(SdcnError, FloatingPointError):
    """A NaN/inf reached parameters or the loss.

    ``checkpoint`` holds the last good model when the trainer had one.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class InvalidArchitectureError(SdcnError, ValueError):
    pass


class DataError(SdcnError, ValueError):
    """Input data is unusable (non-finite values, empty sets...)."""


class DegenerateInputError(DataError):
    """Input has too little structure to cluster (e.g. one distinct point)."""


class ConfigError(SdcnError, ValueError):
    pass


class FormatError(SdcnError, ValueError):
    """A binary container is malformed."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    def __init__(self, found, expected):
        super().__init__(f"unsupported format version {found} (expected {expected})")
        self.found = found
        self.expected = expected


class ChecksumError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InvalidDimensionError(FormatError):
    pass
