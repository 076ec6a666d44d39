"""Shared exception types."""


class ShapeError(ValueError):
    """Tensor shapes do not line up for the requested operation."""


class InputError(ValueError):
    """Invalid runtime input (out-of-range token id, empty prompt, ...)."""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config document."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced where only finite values are allowed."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite; carries the last good checkpoint path."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
