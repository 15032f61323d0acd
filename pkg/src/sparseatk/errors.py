"""Exception types shared across the package."""


class SparseAtkError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SparseAtkError):
    """Invalid configuration: bad field values, shape mismatches, incompatible layers."""


class FormatError(SparseAtkError):
    """Malformed file content (IDX, CIFAR binary, model files)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(SparseAtkError):
    """Training failed, e.g. the loss diverged to NaN."""
