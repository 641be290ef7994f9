"""Exception hierarchy shared by all modules."""


class LLCVisionError(Exception):
    """Base class for every error raised by this package."""


class DataError(LLCVisionError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class ImageFormatError(DataError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class CorruptHeaderError(ImageFormatError):
    pass


class ImageTooSmallError(DataError):
    pass


class EmptyDescriptorSetError(DataError):
    pass


class NoDescriptorsError(DataError):
    """The corpus produced no non-zero descriptors."""


class PoolTooSmallError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class EmptyClassError(DataError):
    pass


class DuplicateClassError(DataError):
    pass


class MissingUnknownError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


class NonFiniteLossError(LLCVisionError, ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class InvariantViolation(LLCVisionError, AssertionError):
    """Internal consistency check failed."""


class PoolShortfallWarning(UserWarning):
    """Fewer descriptors were available than the requested pool size."""
