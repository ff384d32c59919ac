"""Exception hierarchy shared across the package."""

from __future__ import annotations


class R2iveError(Exception):
    """Base class for all errors raised by this package."""


class InputError(R2iveError, ValueError):
    """Malformed or non-finite input data."""


class SchemaError(InputError):
    """A column named in the schema is missing from the input file."""


class ParseError(InputError):
    """A cell could not be parsed as a number."""

    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"cannot parse {value!r} as a number at row {row}, column {column!r}")


class SingularDesignError(R2iveError, ValueError):
    """A design matrix is rank deficient where full rank is required."""


class DimensionError(R2iveError, ValueError):
    """Too few observations for the requested number of regressors."""


class DegenerateInstrumentError(R2iveError, ValueError):
    """An instrument has too few distinct values for the requested spline basis."""


class DegenerateFirstStageError(R2iveError, ValueError):
    """The first stage selected no relevant instrument, so the fitted treatment is zero."""


class CollinearityError(R2iveError, ValueError):
    """The post-selection regressors are collinear."""

    def __init__(self, message: str, columns: list[str] | None = None):
        self.columns = list(columns or [])
        super().__init__(message)


class TuningError(R2iveError, RuntimeError):
    """Every point of a tuning grid failed to converge."""


class HarnessError(R2iveError, RuntimeError):
    """Too many Monte Carlo replications failed."""


class IdentificationWarning(UserWarning):
    """Half or more of the candidate instruments were flagged invalid."""


class DegenerateInstrumentWarning(UserWarning):
    """An instrument's spline block was degraded to the linear basis."""
