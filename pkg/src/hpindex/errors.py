"""Exception hierarchy shared across the package.

Every exception carries the exit code the CLI maps it to:
1 usage, 2 data/input, 3 numerical or convergence failure.
"""


class HousePriceError(Exception):
    exit_code = 1


class DataError(HousePriceError):
    """Bad input data, unreadable files, or schema mismatches."""

    exit_code = 2


class MalformedSeriesError(DataError):
    """A house's sale series is out of order or has non-positive gaps."""


class EmptyInputError(DataError):
    """No usable rows after parsing/filtering."""


class DomainError(DataError):
    """Argument outside the model's valid domain (e.g. quarter out of range)."""


class SchemaVersionError(DataError):
    """Persisted artifact carries an unknown or mismatched format tag."""


class UnsupportedPredictionError(DataError):
    """The estimator cannot predict this observation (e.g. no previous sale)."""


class NumericalError(HousePriceError):
    """Numerical failure while fitting."""

    exit_code = 3


class IdentifiabilityError(NumericalError):
    """The requested parameters are not identifiable from the data given."""


class ConvergenceError(NumericalError):
    """Root finding or iteration failed to converge."""


class NegativeWeightError(NumericalError):
    """Second-stage variance regression produced non-positive fitted values."""
