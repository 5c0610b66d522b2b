"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or Inf shows up where only finite values are allowed."""


class MaskError(ValueError):
    """Raised when an attention mask leaves a query row with no keys."""


class DataFormatError(ValueError):
    """Raised on malformed dataset files or inconsistent scene structures."""
