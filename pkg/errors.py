"""
errors.py

Exception hierarchy shared by every gridssl module.
Each class carries the exit code the command-line entry point reports for it.
"""

from typing import Optional


class GridSSLError(Exception):
    """Base class for all gridssl errors."""

    exit_code = 1


class ConfigError(GridSSLError):
    """Invalid, missing or unknown configuration key or value."""

    exit_code = 2


class NumericAbort(GridSSLError):
    """
    Training produced a non-finite loss or gradient.

    Args:
        message: Human readable description
        step: Micro-step index at which training aborted
        batch_seed: The (seed, step) pair that regenerates the offending batch
    """

    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None, batch_seed: Optional[tuple] = None):
        super().__init__(message)
        self.step = step
        self.batch_seed = batch_seed


class StorageError(GridSSLError):
    """File could not be read or written, or has the wrong magic/version."""

    exit_code = 4


class ShapeError(GridSSLError, ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(GridSSLError, ArithmeticError):
    """A forward operation produced NaN or Inf from finite inputs."""

    exit_code = 3


class DegenerateStateError(GridSSLError, ArithmeticError):
    """
    Norm-ReLU received an input with no positive component.

    Args:
        message: Human readable description
        step: Unroll step at which the state collapsed, when known
    """

    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class AnalysisError(GridSSLError):
    """An analysis cannot be computed on the data it was given."""
