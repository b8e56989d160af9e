"""Exception hierarchy shared across the package."""


class RobuMTLError(Exception):
    """Base class for all package errors."""


class ValidationError(RobuMTLError, ValueError):
    """Bad argument value or violated precondition."""


class DimensionError(ValidationError):
    """Shapes that cannot be combined."""


class FormatError(RobuMTLError, ValueError):
    """Malformed or corrupted binary file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrainingError(RobuMTLError, RuntimeError):
    """Optimization diverged or produced non-finite values."""


class ModeError(ValidationError):
    """Operation is not available in the configured pipeline mode."""
