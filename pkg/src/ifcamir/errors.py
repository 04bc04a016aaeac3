"""Exception types shared across the package."""


class InputError(ValueError):
    """Arguments violate a documented precondition (shape, range, emptiness)."""


class FormatError(InputError):
    """A file on disk is not in the expected binary or text layout."""


class NumericError(ArithmeticError):
    """A computation produced or received a non-finite value."""


class UnsupportedOperation(TypeError):
    """The operation is not defined for this model family."""
