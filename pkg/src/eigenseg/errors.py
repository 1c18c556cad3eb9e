"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` is a usage problem (1),
``DataError`` covers malformed inputs and files (2), ``NumericError`` a
numerical failure during computation (3).
"""


class EigensegError(Exception):
    """Base class for all package errors."""


class ConfigError(EigensegError, ValueError):
    """Invalid hyperparameter, flag or configuration value."""


class DataError(EigensegError, ValueError):
    """Malformed input data or file."""


class FormatError(DataError):
    """A binary or text file does not follow its declared format."""


class IsolatedVertexError(DataError):
    """A graph row has zero degree and cannot be normalized."""

    def __init__(self, row: int):
        super().__init__(f"isolated vertex: row {row} has zero degree")
        self.row = row


class NumericError(EigensegError, ArithmeticError):
    """Non-finite values, failed convergence or degenerate factorization."""
