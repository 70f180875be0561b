"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data/vocabulary problems exit 2, numeric failures exit 3.
"""


class LamateError(Exception):
    """Base class for all package errors."""


class ArgumentError(LamateError, ValueError):
    """A function was called with an invalid argument value."""


class DimensionError(ArgumentError):
    """Tensor shapes are incompatible with the requested operation."""


class DegenerateInputError(ArgumentError):
    """An input is structurally valid but leaves nothing to compute (e.g. an all-masked loss)."""


class NumericError(LamateError, ArithmeticError):
    """A computation produced or received NaN/Inf where finite values are required."""


class StateError(LamateError, RuntimeError):
    """An object was used in an order its lifecycle does not allow."""


class CapacityError(StateError):
    """A preallocated buffer (e.g. a KV cache) ran out of room."""


class LengthError(ArgumentError):
    """A sequence exceeds a configured maximum length."""


class DataError(LamateError):
    """A data file is malformed. Carries the offending line number when known."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += str(path)
        if line is not None:
            prefix += f":{line}"
        super().__init__(f"{prefix}: {message}" if prefix else message)


class VocabError(DataError):
    """A symbol or token id is not covered by the vocabulary."""


class ConfigError(LamateError):
    """A run configuration is malformed or inconsistent."""
