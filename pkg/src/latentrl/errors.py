"""Exception types shared across the package."""


class LatentRLError(Exception):
    """Base class for all package errors."""


class DimensionError(LatentRLError, ValueError):
    """Array shapes are incompatible with an operation."""


class ContractError(LatentRLError, ValueError):
    """A precondition on an argument was violated."""


class CapacityError(LatentRLError, ValueError):
    """A sequence does not fit in the model's context window."""


class NonFiniteError(LatentRLError, FloatingPointError):
    """An operation produced NaN or Inf."""


class CheckpointError(LatentRLError):
    """A checkpoint file could not be read."""


class ConfigError(LatentRLError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericAbort(LatentRLError):
    """Too many consecutive training steps produced non-finite values."""
