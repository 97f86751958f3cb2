"""Exception types raised across the toolkit."""


class SAReachError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(SAReachError, ValueError):
    """Bad dimensions, empty inputs or violated preconditions."""


class NotFoundError(SAReachError, KeyError):
    def __str__(self):
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class EvaluationError(SAReachError, FloatingPointError):
    """A user-supplied function returned a non-finite value."""


class DivergenceError(SAReachError, FloatingPointError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class SingularFitError(SAReachError, ArithmeticError):
    pass


class BlowUpError(SAReachError, OverflowError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class InvalidTargetError(SAReachError, ValueError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class NumericalError(SAReachError, FloatingPointError):
    pass


class OutOfDomainError(SAReachError, ValueError):
    pass


class ScenarioError(SAReachError, ValueError):
    """Scenario file failed validation."""
