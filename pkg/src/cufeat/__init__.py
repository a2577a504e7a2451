"""Class-unique-feature losses, the p-q label game, and a small numpy trainer."""

__version__ = "0.1.0"

from .numerics import (
    DegenerateInputError,
    GridTooLargeError,
    InvalidInputError,
    NumericError,
    entropy_nat,
    softmax,
)

__all__ = [
    "DegenerateInputError", "GridTooLargeError", "InvalidInputError", "NumericError",
    "entropy_nat", "softmax", "__version__",
]
