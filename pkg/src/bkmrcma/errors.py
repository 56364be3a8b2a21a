"""Exception hierarchy.

Each class carries a stable ``exit_code`` used by the command-line layer.
"""

from __future__ import annotations


class BkmrError(Exception):
    exit_code = 1


class InputError(BkmrError, ValueError):
    """Malformed arrays: wrong shapes, non-finite entries, bad arguments."""

    exit_code = 4


class InvalidStateError(BkmrError, ValueError):
    exit_code = 4


class SchemaError(BkmrError, ValueError):
    """Column roles or kernel-input layouts that do not line up."""

    exit_code = 4


class SingularDesignError(BkmrError, ValueError):
    exit_code = 5

    def __init__(self, message: str, columns: list[str] | None = None):
        super().__init__(message)
        self.columns = list(columns or [])


class NumericalError(BkmrError, ArithmeticError):
    """Cholesky failure after the jitter ladder was exhausted."""

    exit_code = 5


class InitializationError(BkmrError, RuntimeError):
    exit_code = 5


class DataIOError(BkmrError, OSError):
    exit_code = 3
