"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Arguments violate an operation's preconditions."""


class NumericalDegeneracyError(ArithmeticError):
    """A probability computation lost all of its mass."""

    def __init__(self, message, timestep=None):
        super().__init__(message)
        self.timestep = timestep


class NumericalDivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, client=None, step=None):
        super().__init__(message)
        self.client = client
        self.step = step


class SizeLimitError(InvalidInputError):
    """An exhaustive computation would exceed its enumeration budget."""


class FormatError(ValueError):
    """A file does not match its declared binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
