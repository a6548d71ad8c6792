"""Exception types. Each maps to a CLI exit code."""

from __future__ import annotations


class ResynthError(Exception):
    exit_code = 1


class ConfigError(ResynthError, ValueError):
    exit_code = 2


class MissingPrerequisiteError(ResynthError, FileNotFoundError):
    exit_code = 3


class NumericalError(ResynthError, ArithmeticError):
    exit_code = 4


class FormatError(ResynthError, ValueError):
    """Malformed binary artifact. ``offset`` is the byte position of the fault."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(ResynthError):
    """An upstream artifact no longer matches the checksum its manifest recorded."""

    exit_code = 3
