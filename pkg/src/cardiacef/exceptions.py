"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` to exit code 3.
"""


class ValidationError(ValueError):
    """Bad input, configuration or shape."""


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed or truncated binary/CSV file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(ArithmeticError):
    """Non-finite values or a degenerate quantity (e.g. zero norm)."""
