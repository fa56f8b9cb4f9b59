"""Exception hierarchy.

Validation problems derive from :class:`ValueError` so callers that only care
about "bad input" can catch that; numerical breakdowns are kept separate
because the CLI maps them to a different exit code.
"""


class Splat2DError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(Splat2DError, ValueError):
    """Input failed a precondition check."""


class InvalidParameterError(ValidationError):
    pass


class EmptyFieldError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed or unsupported file."""


class NumericalError(Splat2DError, ArithmeticError):
    """A computation produced non-finite values."""
