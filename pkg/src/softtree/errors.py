"""Exception types shared across the package."""


class SoftTreeError(Exception):
    """Base class for all softtree errors."""


class ConfigError(SoftTreeError, ValueError):
    """Invalid configuration: bad shapes, impossible geometry, unknown keys."""


class InputError(SoftTreeError, ValueError):
    """A runtime input (batch, label, site name) violates a precondition."""


class DataError(SoftTreeError, ValueError):
    """Dataset or image file cannot be read or is malformed."""


class StateError(SoftTreeError, RuntimeError):
    """An operation was called in an invalid order (double backward, eval
    before any training step, ...)."""


class NumericError(SoftTreeError, ArithmeticError):
    """A numeric invariant was violated (non-finite values, probability
    sums off by more than tolerance, gates outside [0, 1])."""


class CheckpointError(SoftTreeError, ValueError):
    """Checkpoint file is corrupt, unsupported, or inconsistent."""
