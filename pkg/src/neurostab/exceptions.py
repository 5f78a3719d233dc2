"""Exception types shared across the package."""


class NeurostabError(Exception):
    """Base class for all package errors."""


class ConfigMismatchError(NeurostabError, ValueError):
    """Two Taylor polynomials built under different algebra configurations."""


class DomainError(NeurostabError, ValueError):
    """Constant part of an argument lies outside the domain of a function."""


class ValidationError(NeurostabError, ValueError):
    """Malformed input: bad dimensions, files, bounds or flags."""


class IntegrationError(NeurostabError, RuntimeError):
    """The adaptive integrator gave up before reaching the final time."""

    def __init__(self, message, t_reached):
        super().__init__(f"{message} (reached t={t_reached:.6g})")
        self.t_reached = t_reached


class ConvergenceError(NeurostabError, RuntimeError):
    """An iterative solver did not meet its tolerance."""

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
