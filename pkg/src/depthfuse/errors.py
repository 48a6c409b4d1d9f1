"""Exception types shared across the package."""


class DepthfuseError(Exception):
    """Base class for every package-specific error."""


class ShapeError(DepthfuseError, ValueError):
    """Array shapes incompatible with a layer or operation."""


class UsageError(DepthfuseError, RuntimeError):
    """API misuse, e.g. backward before forward."""


class TrainingError(DepthfuseError, RuntimeError):
    """Training cannot proceed (non-finite gradients, divergence, degenerate data)."""


class ConstraintError(DepthfuseError, ValueError):
    """A mathematical precondition is violated (negative pairwise weights,
    non positive-definite precision matrix, unnormalized distribution)."""


class NumericalError(DepthfuseError, RuntimeError):
    """A solver failed; the message carries a conditioning diagnostic."""


class DataError(DepthfuseError, ValueError):
    """Input data outside its contract (labels out of range, invalid depth map)."""


class ParseError(DepthfuseError, ValueError):
    """Malformed file. ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapacityError(DepthfuseError, RuntimeError):
    """A configured memory/size cap was exceeded; the message says how to raise it."""
