"""Base exceptions shared across packages"""


class RestoredDepthError(Exception):
    """Base exception for all errors raised by this package"""
    pass


class ShapeMismatchError(RestoredDepthError):
    """Raised when tensor dimensions do not fit an operation"""
    pass
