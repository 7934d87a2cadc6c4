"""
Error hierarchy for roundcast.

Every failure the library raises on purpose derives from `RoundcastError`.
Each subclass carries the process exit code the CLI reports for it:

- 1: usage errors (bad flags, unknown architecture)
- 2: data, schema, parse, storage and checkpoint format errors
- 3: numeric, shape, parameter, integrity and contract errors
"""

from __future__ import annotations

from typing import Optional


class RoundcastError(RuntimeError):
    """Generic roundcast error."""

    exit_code: int = 3


class UsageError(RoundcastError):
    exit_code = 1


class DataError(RoundcastError):
    """Input data is missing, empty or structurally unusable."""

    exit_code = 2


class SchemaError(DataError):
    """A CSV header or document lacks a required field."""


class ParseError(DataError):
    """A cell could not be parsed. Carries the file and 1-based line."""

    def __init__(
        self, message: str, path: Optional[str] = None, line: Optional[int] = None
    ):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class StorageError(DataError):
    """Reading or writing a file failed."""


class CheckpointFormatError(DataError):
    def __init__(self, message: str, format_version: object = None):
        self.format_version = format_version
        super().__init__(f"{message} (format_version={format_version!r})")


class NumericError(RoundcastError):
    """A non-finite value reached a computation that forbids it."""


class DimensionError(NumericError):
    pass


class ParameterError(NumericError):
    """A scalar argument is outside its documented range."""


class ConfigurationError(ParameterError):
    pass


class IntegrityError(NumericError):
    """Data contradicts an invariant (e.g. a winner label changing mid-round)."""


class LabelError(NumericError):
    pass


class CapacityError(NumericError):
    """A sequence is longer than the model's positional table."""


class MetricUndefinedError(NumericError):
    pass


class ContractError(NumericError):
    """A precondition on model state does not hold."""
