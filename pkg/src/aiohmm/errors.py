"""Exception hierarchy shared by every module of the package."""


class AioHmmError(Exception):
    """Base class for all errors raised by :mod:`aiohmm`."""


class InvalidArgumentError(AioHmmError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(AioHmmError, ArithmeticError):
    """A computation broke down numerically (non-PD matrix, underflow, ...)."""


class InternalError(AioHmmError, RuntimeError):
    """A guarantee the code relies on was violated; indicates a bug."""


class ParseError(AioHmmError, ValueError):
    """A data file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    """A data file parsed but its content has the wrong shape or fields."""
