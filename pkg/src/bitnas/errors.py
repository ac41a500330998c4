"""Shared exception types."""


class GeometryError(ValueError):
    """Raised when a requested tensor/convolution geometry is impossible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


class FormatError(ValueError):
    """Raised when an on-disk artifact does not match its documented format."""


class DivergenceError(RuntimeError):
    """Raised when a training loop produces a non-finite loss."""
