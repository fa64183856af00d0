"""Exception types shared across the package."""


class SemmsError(Exception):
    """Base class for all package errors."""


class DataError(SemmsError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalFailure(SemmsError, ArithmeticError):
    """A computation produced a non-finite or degenerate result.

    ``detail`` carries whatever context the raiser had (offending term,
    best point found, iteration trace).
    """

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail if detail is not None else {}


class ConvergenceFailure(NumericalFailure):
    """An iterative solver stopped without meeting its criterion."""
