"""Small dense linear-algebra helpers shared by the statistical modules."""

import numpy as np
from scipy.linalg import solve_triangular

from .errors import SingularMatrixError

JITTER = 1e-10


def cholesky(a, jitter=True):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    On failure, retry once with ``JITTER * trace(a) / m`` added to the
    diagonal when `jitter` is set; a second failure raises
    `SingularMatrixError`.
    """
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if not jitter:
            raise SingularMatrixError("matrix is not positive definite") from None
    m = a.shape[0]
    bump = JITTER * max(np.trace(a), 0.0) / m
    if not np.isfinite(bump) or bump <= 0.0:
        raise SingularMatrixError("matrix is not positive definite")
    try:
        return np.linalg.cholesky(a + bump * np.eye(m))
    except np.linalg.LinAlgError:
        raise SingularMatrixError(
            "matrix is not positive definite after diagonal jitter") from None


def lower_solve(chol, b):
    return solve_triangular(chol, b, lower=True, check_finite=False)


def upper_solve_t(chol, b):
    """Solve ``chol.T @ x = b`` for lower-triangular `chol`."""
    return solve_triangular(chol, b, lower=True, trans="T", check_finite=False)


def chol_logdet(chol):
    return 2.0 * np.sum(np.log(np.diag(chol)))


def symmetrize(a):
    return 0.5 * (a + a.T)
