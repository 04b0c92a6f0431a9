"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes or dimensions do not conform."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class FormatError(RuntimeError):
    """A serialized artifact is malformed, truncated, or corrupt."""
