"""Exception types shared across the toolkit."""


class GlycoError(Exception):
    """Base class for all toolkit errors."""


class ParseError(GlycoError):
    """A file could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(GlycoError):
    """Input data violates a documented invariant."""


class EmptyInputError(GlycoError):
    """An input file or sequence contained no usable data."""


class EmptyDatasetError(GlycoError):
    """A preprocessing stage removed every usable day."""


class InsufficientDataError(GlycoError):
    """Too little data to perform the requested split or fit."""


class InterpolationError(GlycoError):
    """A day cannot be interpolated (fewer than 2 present readings)."""


class DegenerateScaleError(GlycoError):
    """A channel is constant on the training days (std = 0)."""


class ContractError(GlycoError):
    """A caller violated an operation's precondition."""


class NumericError(GlycoError):
    """A computation produced non-finite values."""


class FitError(GlycoError):
    """A model fit failed to converge or hit a singular system."""


class TrainingError(GlycoError):
    """Iterative training diverged; carries the epoch index."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class ConfigError(GlycoError):
    """An experiment configuration is invalid (CLI exit code 2)."""
