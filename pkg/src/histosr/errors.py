"""Exception types shared across the package.

The CLI maps these onto its exit codes: configuration 2, data/format 3,
numeric 4.
"""


class HistoSRError(Exception):
    """Base class for all package errors."""


class ConfigError(HistoSRError, ValueError):
    """Invalid parameters, sizes or configuration."""


class ShapeError(HistoSRError, ValueError):
    """Tensor or image shapes that do not fit together."""


class DataError(HistoSRError):
    """Unreadable, missing or inconsistent data on disk."""


class FormatError(DataError, ValueError):
    """A file that does not follow its binary or JSON layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(HistoSRError, ArithmeticError):
    """Non-finite values produced during training or gradient checks."""
