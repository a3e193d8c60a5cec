"""Exception types raised across the toolkit."""


class FFCError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FFCError, ValueError):
    pass


class ConfigError(FFCError, ValueError):
    pass


class DomainError(FFCError, ValueError):
    pass


class NumericError(FFCError, ArithmeticError):
    pass


class UsageError(FFCError, RuntimeError):
    """A layer was driven out of order (e.g. backward before forward)."""


class FormatError(FFCError, ValueError):
    """Malformed dataset or checkpoint bytes."""


class LabelRangeError(FormatError):
    pass


class DivergenceError(FFCError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
