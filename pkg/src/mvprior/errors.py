"""Exception hierarchy shared by every module."""


class MvpriorError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(MvpriorError, ValueError):
    pass


class EmptyObjectError(MvpriorError, ValueError):
    """A mask that should contain an object has no foreground pixels."""


class InsufficientDataError(MvpriorError, ValueError):
    pass


class DimensionMismatchError(MvpriorError, ValueError):
    pass


class NotPSDError(MvpriorError, ValueError):
    """Cholesky failed on every rung of the jitter ladder."""


class GenerationError(MvpriorError, RuntimeError):
    pass


class DataFormatError(MvpriorError, ValueError):
    """Malformed file on disk; the message names the offending path."""


class NumericError(MvpriorError, FloatingPointError):
    """A loss term became non-finite during training."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})
