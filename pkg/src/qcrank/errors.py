"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI:
  ConfigurationError -> 2, data-shaped errors -> 3, numeric errors -> 4.
"""


class QcrankError(Exception):
    """Base class for all package errors."""


class ConfigurationError(QcrankError):
    """Invalid configuration values or incompatible options."""


class DataError(QcrankError):
    """Dataset-level problems (empty splits, missing inputs)."""


class SchemaError(DataError):
    """A record violates the declared dataset schema."""


class ParseError(DataError):
    """A serialized file could not be parsed; carries a line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class SplitError(DataError):
    """A chronological split could not be produced."""


class LabelError(DataError):
    """Click labels violate the exactly-one-click contract."""


class NumericError(QcrankError):
    """Non-finite values encountered during computation."""


class DimensionError(NumericError):
    """Shape or dimension mismatch."""


class DegenerateInputError(NumericError):
    """Input is structurally degenerate (e.g. all-zero matrix)."""
