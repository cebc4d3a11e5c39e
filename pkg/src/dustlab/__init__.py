"""Graph-regularised low-rank plus sparse video decomposition and its deep-unfolded network."""

from .errors import DivergenceError, FormatError, NotPositiveDefiniteError, NumericalError, UsageError

__all__ = [
    "DivergenceError",
    "FormatError",
    "NotPositiveDefiniteError",
    "NumericalError",
    "UsageError",
]
__version__ = "0.1.0"
