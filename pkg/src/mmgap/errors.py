class MMGError(Exception):
    pass


class ConfigError(MMGError, ValueError):
    """Inconsistent dimensions or invalid configuration values."""


class DomainError(MMGError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NumericError(MMGError, ArithmeticError):
    """Non-finite values appeared during a computation."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
