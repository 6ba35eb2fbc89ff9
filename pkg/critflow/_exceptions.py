"""
Define critflow exceptions
"""
from __future__ import annotations


class CritflowException(Exception):
    """
    Base class of every error raised by critflow.
    """
    pass


class ModelError(CritflowException):
    """
    Raised when a built-in energy name is unknown.
    """
    pass


class InvalidParamsError(ModelError):
    """
    Raised when built-in parameters are out of range.
    """
    pass


class DimensionMismatchError(CritflowException):
    """
    Raised when a state, seed or perturbation has the wrong dimension.
    """
    pass


class StepSizeError(CritflowException):
    """
    Raised when a flow configuration violates the implicit step constraint.
    """
    pass


class NewtonDivergenceError(CritflowException):
    """
    Raised when the implicit Euler solve fails at some step.
    """

    def __init__(self, step, residual):
        self.step = step
        self.residual = residual
        self.args = (step, residual)

    def __str__(self):
        return (
            f'Newton solve diverged at step {self.step} '
            f'(last residual {self.residual:.3e})'
        )


class ContinuationError(CritflowException):
    """
    Raised when a branch cannot be started from the given point.
    """
    pass


class SweepError(CritflowException):
    """
    Raised for an invalid viscosity schedule or an unusable sweep.
    """
    pass


class ConfigError(CritflowException):
    """
    Raised when a run configuration violates the schema.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f'{field}: {message}')
        self.field = field


class PandasNotSupported(EnvironmentError):
    def __init__(self):
        super().__init__('Missing pandas package')
