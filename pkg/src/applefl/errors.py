"""Exception hierarchy; each class maps to one CLI exit code."""

from __future__ import annotations


class AppleFLError(Exception):
    exit_code = 1


class ConfigError(AppleFLError, ValueError):
    """Invalid configuration or mismatched dimensions.

    ``pointer`` is a JSON pointer into the config document when one applies.
    """

    exit_code = 1

    def __init__(self, message: str, pointer: str | None = None):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}" if pointer else message)


class DataError(AppleFLError, ValueError):
    exit_code = 2


class IngestionError(DataError):
    def __init__(self, message: str, path: str | None = None, offset: int | None = None,
                 line: int | None = None):
        self.path, self.offset, self.line = path, offset, line
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class NumericError(AppleFLError, ArithmeticError):
    exit_code = 3
