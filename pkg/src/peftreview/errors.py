"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes, so every failure a user can
trigger should surface as one of them.
"""


class ReviewerError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(ReviewerError):
    """An API was called in a way its contract forbids."""


class ShapeError(ReviewerError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ReviewerError, ValueError):
    """Invalid configuration or hyperparameter values."""


class ValidationError(ReviewerError, ValueError):
    """A record violates its field invariants."""


class CompatibilityError(ReviewerError):
    """An adapter or checkpoint does not belong to the given model config."""


class LengthError(ReviewerError):
    """A token sequence exceeds the configured context length."""


class FormatError(ReviewerError):
    """Malformed file contents (binary container, dataset line, tokenizer)."""

    exit_code = 2


class NumericError(ReviewerError, ArithmeticError):
    """Training produced a non-finite value."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
