"""Exception types shared across the package."""


class BrainAgeError(Exception):
    """Base class for all package errors."""


class ShapeError(BrainAgeError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(BrainAgeError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(BrainAgeError, ArithmeticError):
    """Non-finite values were encountered where finite ones are required."""


class ConfigError(BrainAgeError, ValueError):
    """Configuration is invalid.

    ``fields`` lists every violated field so callers can report them at once.
    """

    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = list(fields or [])


class DataError(BrainAgeError, ValueError):
    """Input data violates a domain invariant (e.g. unknown region id)."""


class ChecksumError(BrainAgeError, IOError):
    """A stored file is truncated or does not match its recorded digest."""


class FormatVersionError(BrainAgeError, ValueError):
    """A stored artifact was written by an incompatible format version."""


class DegenerateVarianceError(BrainAgeError, ValueError):
    """A statistic is undefined because a sample has zero variance."""


class TrainingDivergedError(BrainAgeError, RuntimeError):
    """Training produced a non-finite loss."""
