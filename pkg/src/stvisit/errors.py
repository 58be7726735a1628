"""Exception hierarchy shared by every stvisit module."""


class StvisitError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(StvisitError, ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class NumericError(StvisitError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, where: str, message: str = "non-finite value produced"):
        self.where = where
        super().__init__(f"{where}: {message}")


class ContractError(StvisitError, ValueError):
    """A precondition of an operation was violated by its caller."""


class ParameterError(StvisitError, ValueError):
    """A hyperparameter or argument lies outside its admissible range."""


class ConfigError(StvisitError, ValueError):
    """A configuration document is invalid."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
