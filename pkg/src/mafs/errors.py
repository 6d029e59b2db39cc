class InvalidInputError(ValueError):
    """Input violates a documented precondition (shape, range, channel count)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""
