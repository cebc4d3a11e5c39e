"""Exception types shared across dustlab."""


class NumericalError(ArithmeticError):
    """A factorization failed or an iterate stopped being finite."""


class NotPositiveDefiniteError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(ValueError):
    """Malformed binary input (IDX files, dataset caches, checkpoints)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(ValueError):
    """Bad command-line or config input."""
