"""Exception types raised across the package."""

import numpy as np


class ArgumentError(ValueError):
    """Invalid argument: wrong shape, non-finite input, out-of-range value."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix that must be positive definite could not be factorized."""


class MomentUndefinedError(ValueError):
    """Requested moment does not exist for the given degree of freedom."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=np.nan):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class StiffnessError(RuntimeError):
    """The adaptive integrator step size underflowed."""


class TuningError(RuntimeError):
    """Every run of a tuning sweep diverged."""

    def __init__(self, message, table=None):
        super().__init__(message)
        self.table = table


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""
