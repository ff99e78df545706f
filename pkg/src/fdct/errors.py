"""Exception types raised across the package."""


class FDCTError(Exception):
    """Base class for all package errors."""


class ShapeError(FDCTError, ValueError):
    """Incompatible tensor shapes (inner dims, channel splits, patching, heads)."""


class BroadcastError(ShapeError):
    pass


class AxisError(ShapeError):
    pass


class RankError(ShapeError):
    pass


class DomainError(FDCTError, ValueError):
    """An operand lies outside the domain of an operation.

    ``operand`` is the positional index of the offending input.
    """

    def __init__(self, message: str, operand: int = 0):
        super().__init__(message)
        self.operand = operand


class NormalizationError(DomainError):
    pass


class NumericError(FDCTError, FloatingPointError):
    """A non-finite value appeared; ``where`` names the component or block."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message)
        self.where = where


class WeightError(FDCTError, ValueError):
    pass


class LabelError(FDCTError, ValueError):
    pass


class ConfigError(FDCTError, ValueError):
    pass


class SplitError(FDCTError, ValueError):
    pass


class DatasetError(FDCTError, OSError):
    """Missing, unreadable or corrupt dataset file. ``path`` names it."""

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class CheckpointExistsError(FDCTError, FileExistsError):
    """The output directory already holds a checkpoint and ``overwrite`` was not set."""
