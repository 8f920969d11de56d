"""Exception types shared across the engine."""


class ProtosplitError(Exception):
    """Base class for all engine errors."""


class ShapeError(ProtosplitError):
    """Dimension mismatch between two operands; message names both shapes."""


class ValidationError(ProtosplitError):
    """Input violates a documented precondition or invariant."""


class BundleError(ProtosplitError):
    """A bundle on disk is missing, corrupt, or from an unsupported schema."""


class ConvergenceError(ProtosplitError):
    """A split run produced a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, step: int | None = None, loss: float | None = None):
        super().__init__(message)
        self.step = step
        self.loss = loss
