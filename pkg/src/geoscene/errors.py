"""Exception hierarchy shared by every geoscene module.

Each class carries the process exit code the command line uses when the
error escapes a subcommand: 1 for usage problems, 2 for data and format
problems, 3 for numeric failures.
"""

from __future__ import annotations


class GeosceneError(Exception):
    exit_code = 2


class UsageError(GeosceneError):
    exit_code = 1


class ParameterError(GeosceneError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 1


class DimensionError(GeosceneError, ValueError):
    """Shapes of the operands do not agree."""


class ContractError(GeosceneError, RuntimeError):
    """An operation was invoked in a state its contract forbids."""


class DataError(GeosceneError, ValueError):
    """Input records are malformed, inconsistent or out of range."""


class FormatError(DataError):
    """A binary or text file does not follow its declared layout."""


class EncodingError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class PlacementError(GeosceneError):
    """The entity cannot be placed inside the image; the caller should resample."""


class GenerationError(DataError):
    pass


class NumericError(GeosceneError, FloatingPointError):
    exit_code = 3


class TrainingError(NumericError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
