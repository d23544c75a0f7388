"""Exception types shared across the package."""


class ConecError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ConecError, ValueError):
    pass


class InvalidShapeError(ConecError, ValueError):
    pass


class NumericError(ConecError, ArithmeticError):
    """Raised on non-finite values, non-convergence or non-PD matrices."""


class ConfigError(ConecError, ValueError):
    pass


class StateError(ConecError, RuntimeError):
    """An operation was called on an engine in the wrong state."""
