"""Exception types raised across the package."""

from __future__ import annotations


class DimensionMismatchError(ValueError):
    """Two vectors or distributions that must agree in length do not."""


class IDXFormatError(ValueError):
    """An IDX file has a bad magic number, header, or payload length."""


class IDXMismatchError(ValueError):
    """Image and label IDX files disagree on the number of items."""


class DegenerateGameError(ValueError):
    """The game is evaluated at a point where it is undefined.

    Raised when every budget in a round is zero (the reward share divides by
    zero) or when a Stackelberg coefficient is nonpositive and dropout
    handling has been disabled.
    """


class FitError(RuntimeError):
    """The accuracy-model fit failed or produced a degenerate curve."""


class EmptySelectionError(RuntimeError):
    """No client passed the selection threshold."""


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ConfigValidationError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field} {message}")


class CSVSchemaError(ValueError):
    """A metrics CSV does not match the round-metrics schema."""
