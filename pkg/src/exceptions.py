"""Exceptions raised across the package.

Input-validation errors derive from ``ValueError`` so callers that only care about
"bad input" can catch a single type.
"""


class ContainerFormatError(ValueError):
    """Raised when a tensor container file is malformed."""


class ImageLoadError(ValueError):
    """Raised when an image folder cannot be turned into a batch."""


class ConfigError(ValueError):
    """Raised for unknown, missing or malformed configuration keys."""


class TrainingDivergenceError(RuntimeError):
    """Raised when a training loss stops being finite or explodes."""

    def __init__(self, step: int, loss: float) -> None:
        self.step = step
        self.loss = loss
        super().__init__(f"Training diverged at step {step} (loss={loss})")


class ScoreError(ValueError):
    """Raised when an abnormality score cannot be computed."""

    def __init__(self, message: str, sample_index: int = -1) -> None:
        self.sample_index = sample_index
        super().__init__(message)
