"""Exception types shared across the package.

The CLI maps each class to a distinct exit code.
"""


class RareLifeError(Exception):
    """Base class for all package errors."""


class ConfigError(RareLifeError, ValueError):
    """Invalid configuration or argument combination."""


class DataError(RareLifeError, ValueError):
    """Input data violates a structural contract."""


class NumericalError(RareLifeError, ArithmeticError):
    """Non-finite values or a degenerate numerical problem."""
