"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, ValidationError
(and subclasses) exit 2, any other DinpError exits 3.
"""


class DinpError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DinpError, ValueError):
    """Invalid inputs, configuration values, or contract violations."""


class ConfigError(ValidationError):
    """Malformed or inconsistent run configuration."""


class ShapeError(ValidationError):
    """Tensor or raster dimensions do not match what an operation requires."""


class NonFiniteError(DinpError):
    """A NaN or Inf was produced; carries the producing context."""

    def __init__(self, context: str):
        super().__init__(f"non-finite value produced by {context}")
        self.context = context


class CheckpointError(DinpError):
    """Corrupt, truncated, or incompatible checkpoint container."""


class TrainingError(DinpError):
    """Training aborted (for example on a non-finite loss)."""
