"""Exception hierarchy shared across the package."""


class MspemError(Exception):
    """Base class for all package errors."""


class ValidationError(MspemError, ValueError):
    """Input data or configuration violates a documented contract."""


class DomainError(ValidationError):
    """A value lies outside the domain on which a function is defined."""


class SchemaError(ValidationError):
    """Tabular input is missing columns or holds malformed rows.

    ``problems`` lists ``(row_number, message)`` pairs; row numbers are
    1-based data rows (the header is row 0).
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"row {r}: {msg}" if r is not None else msg for r, msg in self.problems]
        super().__init__("schema violations:\n  " + "\n  ".join(lines))


class NumericalError(MspemError, ArithmeticError):
    """An estimation routine failed for numerical reasons."""


class ConvergenceError(NumericalError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class SingularSystemError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class PositivityError(NumericalError):
    """A propensity score of exactly 0 or 1 makes a weight undefined."""
