"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class FormatError(ValidationError):
    """A file or payload does not match its expected layout."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed factorisation during numeric work."""
