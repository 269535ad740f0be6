"""Exception types shared across the package."""


class ProsodyFlowError(Exception):
    """Base class for all package errors."""


class NumericError(ProsodyFlowError):
    """Non-finite values or numerically invalid inputs reached an operation."""


class ShapeError(ProsodyFlowError):
    """Array shapes are inconsistent with what an operation requires."""


class ParameterizationError(ProsodyFlowError):
    """Transform parameters violate their constraints (non-positive scale,
    degenerate spline bins, non-monotone knots)."""


class SingularityError(ProsodyFlowError):
    """A matrix that must be invertible is singular or near-singular."""


class DataError(ProsodyFlowError):
    """Input files or records are malformed or mutually inconsistent."""


class TrainingError(ProsodyFlowError):
    """Training aborted; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CheckFailure(ProsodyFlowError):
    """A verification suite found a violated invariant."""
