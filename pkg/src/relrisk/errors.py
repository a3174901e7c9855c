"""Exception hierarchy shared by all relrisk modules."""


class RelRiskError(Exception):
    """Base class for all errors raised by relrisk."""


class SchemaError(RelRiskError):
    """A column named in a schema or term list is not available."""


class ParseError(RelRiskError):
    """A cell could not be parsed; carries the 1-based data row index."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ValidationError(RelRiskError):
    """Input violates a documented precondition."""


class ConvergenceError(RelRiskError):
    """An iterative solver stopped without meeting its tolerance."""


class DivergenceError(RelRiskError):
    """The likelihood is unbounded along some direction (e.g. separation)."""


class SingularInformationError(RelRiskError):
    """The information matrix cannot be inverted."""
