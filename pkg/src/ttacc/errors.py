"""Error types shared across the toolkit.

The CLI maps these onto exit codes: ShapeError -> 2, NumericError -> 3,
CapacityError -> 4.
"""


class ShapeError(ValueError):
    """Tensor shapes or factor lists are inconsistent."""


class NumericError(ArithmeticError):
    """Numeric failure: SVD non-convergence, NaN ingestion, overflow."""


class CapacityError(RuntimeError):
    """A modeled hardware buffer is too small for the requested run."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class FusionError(ValueError):
    """An illegal operator fusion was requested."""
