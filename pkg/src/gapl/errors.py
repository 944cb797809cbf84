"""Exception hierarchy shared by every gapl module.

Each class carries the CLI exit code it maps to.
"""

from __future__ import annotations


class GaplError(Exception):
    exit_code = 1


class UsageError(GaplError):
    exit_code = 1


class ContractError(GaplError):
    """Shape mismatch or a violated precondition."""

    exit_code = 1


class FormatError(GaplError):
    exit_code = 2

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(GaplError):
    exit_code = 3


class DegenerateInputError(NumericError):
    """Zero-norm operand, empty group, or a similar degenerate input."""


class DomainError(NumericError):
    """Input outside the mathematical domain of an operation."""


class ResourceGuardError(GaplError):
    exit_code = 4
