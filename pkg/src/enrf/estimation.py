"""Robust estimation of t-distribution parameters from samples.

The main entry point is `tlasso`: expectation-maximisation for the mean,
scale and degree of freedom of a multivariate t-distribution, where each
scale update solves a graphical lasso problem so the precision matrix stays
full rank even with fewer samples than dimensions.

Samples are columns: ``samples`` has shape ``(m, M)``.
"""

from dataclasses import dataclass, field
import math
from typing import NamedTuple, Union

import numpy as np
from scipy import optimize, special

from . import _kernels
from ._linalg import cholesky, chol_logdet, lower_solve, symmetrize
from .errors import ArgumentError, ConvergenceError, SingularMatrixError

__all__ = [
    "Fixed", "GridSearch", "RootUpdate", "TlassoConfig", "TlassoResult",
    "DofRoot", "DEFAULT_DOF_GRID", "empirical_weights", "em_step", "glasso",
    "dof_root", "loglik", "tlasso", "default_rho",
]

DEFAULT_DOF_GRID = (3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0, math.inf)
DOF_BRACKET = (2.0 + 1e-3, 1000.0)

ONE_OVER_M = "1/M"
ONE_OVER_M_MINUS_1 = "1/(M-1)"


@dataclass(frozen=True)
class Fixed:
    """Keep the degree of freedom at `nu` throughout the EM."""
    nu: float


@dataclass(frozen=True)
class GridSearch:
    """Run fixed-dof EM for every candidate and keep the most likely fit."""
    grid: tuple = DEFAULT_DOF_GRID


@dataclass(frozen=True)
class RootUpdate:
    """Update the dof inside the EM loop by solving the score equation."""
    nu0: float = 10.0


DofMode = Union[Fixed, GridSearch, RootUpdate]


def default_rho(M, c=0.5):
    """Penalty heuristic ``c / sqrt(M)``."""
    return c / math.sqrt(M)


@dataclass(frozen=True)
class TlassoConfig:
    rho: float = 0.0
    dof_mode: DofMode = field(default_factory=GridSearch)
    max_em_iters: int = 200
    em_tol: float = 1e-6
    glasso_max_iters: int = 100
    glasso_tol: float = 1e-6
    scale_normalization: str = ONE_OVER_M

    def __post_init__(self):
        if not self.rho >= 0.0:
            raise ArgumentError(f"rho must be >= 0, got {self.rho}")
        if self.em_tol <= 0 or self.glasso_tol <= 0:
            raise ArgumentError("tolerances must be positive")
        if self.max_em_iters < 1 or self.glasso_max_iters < 1:
            raise ArgumentError("iteration bounds must be >= 1")
        if self.scale_normalization not in (ONE_OVER_M, ONE_OVER_M_MINUS_1):
            raise ArgumentError(f"unknown normalization {self.scale_normalization!r}")
        mode = self.dof_mode
        if isinstance(mode, Fixed):
            nus = (mode.nu,)
        elif isinstance(mode, GridSearch):
            nus = mode.grid
            if len(nus) == 0:
                raise ArgumentError("dof grid is empty")
        elif isinstance(mode, RootUpdate):
            nus = (mode.nu0,)
        else:
            raise ArgumentError(f"unknown dof mode {mode!r}")
        if any(not nu > 2.0 for nu in nus):
            raise ArgumentError("all degrees of freedom must be > 2")

    def denominator(self, M):
        return float(M) if self.scale_normalization == ONE_OVER_M else float(M - 1)


@dataclass(frozen=True, eq=False)
class TlassoResult:
    """Fitted t-distribution parameters and EM diagnostics."""
    mean: np.ndarray
    scale: np.ndarray
    precision: np.ndarray
    dof: float
    weights: np.ndarray
    iterations: int
    loglik: float
    converged: bool = True
    dof_saturated: bool = False


class DofRoot(NamedTuple):
    nu: float
    saturated: bool


def _as_samples(samples):
    Z = np.ascontiguousarray(samples, dtype=float)
    if Z.ndim != 2:
        raise ArgumentError(f"samples must be a 2-D (m, M) array, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ArgumentError("samples must be finite")
    return Z


def _tau(delta, dof, m):
    if math.isinf(dof):
        return np.ones_like(delta)
    return (dof + m) / (dof + delta)


def empirical_weights(samples, mean, scale_chol, dof):
    """Mahalanobis distances and EM weights ``(dof + m) / (dof + delta)``.

    Returns
    -------
    delta, tau : ndarray, shape (M,)
    """
    Z = _as_samples(samples)
    m = Z.shape[0]
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (m,) or np.shape(scale_chol) != (m, m):
        raise ArgumentError("mean/scale do not match the sample dimension")
    w = lower_solve(scale_chol, Z - mean[:, None])
    delta = np.einsum("ij,ij->j", w, w)
    return delta, _tau(delta, dof, m)


def loglik(samples, mean, scale, dof):
    """Sum of t log-densities of the sample columns.

    Unlike `TDist`, any ``dof > 0`` is accepted here (``dof = 1`` is Cauchy).
    """
    if not dof > 0:
        raise ArgumentError(f"dof must be > 0, got {dof}")
    Z = _as_samples(samples)
    m = Z.shape[0]
    chol = cholesky(scale)
    w = lower_solve(chol, Z - np.asarray(mean, dtype=float)[:, None])
    delta = np.einsum("ij,ij->j", w, w)
    return _loglik_from_delta(delta, chol_logdet(chol), m, dof)


def _loglik_from_delta(delta, logdet, m, dof):
    M = delta.shape[0]
    if math.isinf(dof):
        per = -0.5 * delta
        const = -0.5 * m * math.log(2.0 * math.pi) - 0.5 * logdet
    else:
        per = -0.5 * (dof + m) * np.log1p(delta / dof)
        const = (special.gammaln(0.5 * (dof + m)) - special.gammaln(0.5 * dof)
                 - 0.5 * m * math.log(dof * math.pi) - 0.5 * logdet)
    return float(M * const + per.sum())


# ---------------------------------------------------------------------------
# graphical lasso

def _run_glasso(S, rho, W, B, max_iters, tol):
    status, sweeps, residual, theta = _kernels.glasso_bcd(S, rho, W, B, max_iters, tol)
    if status == _kernels.SINGULAR:
        raise SingularMatrixError("graphical lasso produced a non-positive pivot")
    if status == _kernels.NO_CONVERGENCE:
        raise ConvergenceError(f"graphical lasso did not converge in {max_iters} sweeps",
                               residual)
    return theta


def glasso(S, rho, config=None, warm_start=None):
    """Sparse inverse covariance by the graphical lasso.

    Maximises ``logdet(Theta) - tr(S Theta) - rho * sum_{i != j} |Theta_ij|``
    by block coordinate descent over the columns of the working covariance
    ``W``, each block being a lasso solved by cyclic coordinate descent.

    Parameters
    ----------
    S : (m, m) array
        Symmetric empirical covariance; may be singular when ``rho > 0``.
    rho : float
        Off-diagonal penalty; the diagonal is never penalised, so the
        returned covariance has ``W_ii = S_ii``.
    config : TlassoConfig, optional
        Supplies ``glasso_max_iters`` and ``glasso_tol``.
    warm_start : (m, m) array, optional
        A positive definite precision matrix to start from.

    Returns
    -------
    cov, precision : ndarray
    """
    config = config or TlassoConfig(rho=rho)
    S = np.ascontiguousarray(S, dtype=float)
    m = S.shape[0]
    if S.shape != (m, m) or not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ArgumentError("S must be a symmetric square matrix")
    if rho < 0:
        raise ArgumentError(f"rho must be >= 0, got {rho}")
    S = symmetrize(S)
    if np.any(np.diag(S) <= 0):
        raise SingularMatrixError("S has a non-positive diagonal entry")
    if rho == 0.0:
        theta = np.empty((m, m))
        if not _kernels.spd_inverse(S, theta):
            raise SingularMatrixError("S is singular and rho = 0")
        return S.copy(), theta
    W, B = _glasso_start(S, warm_start)
    theta = _run_glasso(S, rho, W, B, config.glasso_max_iters, config.glasso_tol)
    return W, theta


def _glasso_start(S, precision=None):
    """Working covariance and regression coefficients to start the BCD from."""
    m = S.shape[0]
    if precision is None:
        return S.copy(), np.zeros((m, m))
    B = -precision / np.diag(precision)[None, :]
    np.fill_diagonal(B, 0.0)
    W = np.linalg.inv(precision)
    return np.ascontiguousarray(symmetrize(W)), np.ascontiguousarray(B)


# ---------------------------------------------------------------------------
# degree of freedom

def _score_self_consistent(nu, delta, m):
    return np.sum(special.digamma(0.5 * (nu + m)) - special.digamma(0.5 * nu)
                  + np.log(0.5 * nu) - np.log(0.5 * (nu + delta))
                  - (nu + m) / (nu + delta) + 1.0)


def _score_conditional(nu, delta, m, nu_prev):
    # the E-step quantities are frozen at the previous dof
    return np.sum(np.log(0.5 * nu) + 1.0 - special.digamma(0.5 * nu)
                  + special.digamma(0.5 * (nu_prev + m))
                  - np.log(0.5 * (nu_prev + delta))
                  - (nu_prev + m) / (nu_prev + delta))


def dof_root(deltas, nu_prev, m, self_consistent=True):
    """Degree of freedom solving the likelihood score equation.

    Parameters
    ----------
    deltas : array_like
        Squared Mahalanobis distances of the samples.
    nu_prev : float
        Previous dof estimate.  Only enters the equation when
        ``self_consistent`` is False, in which case the weights are frozen at
        ``nu_prev`` (the conditional-maximisation form used inside EM).
    m : int
        Sample dimension.

    Returns
    -------
    DofRoot
        ``(nu, saturated)``; ``saturated`` is True when the score has no sign
        change on the bracket, in which case the endpoint in the direction
        of increasing likelihood is returned.
    """
    delta = np.asarray(deltas, dtype=float)
    if not np.all(np.isfinite(delta)):
        raise ArgumentError("deltas must be finite")
    if not nu_prev > 2.0:
        raise ArgumentError("nu_prev must be > 2")
    if self_consistent:
        f = lambda nu: _score_self_consistent(nu, delta, m)
    else:
        prev = min(nu_prev, 1e12)
        f = lambda nu: _score_conditional(nu, delta, m, prev)
    lo, hi = DOF_BRACKET
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return DofRoot(lo, False)
    if f_hi == 0.0:
        return DofRoot(hi, False)
    if np.sign(f_lo) == np.sign(f_hi):
        # the score has one sign on the whole bracket: the likelihood is
        # monotone there and the maximiser is the endpoint it climbs towards
        return DofRoot(hi if f_lo > 0 else lo, True)
    return DofRoot(optimize.bisect(f, lo, hi, xtol=1e-8), False)


# ---------------------------------------------------------------------------
# EM

def _initial_state(Z, config):
    """Sample mean and the glasso of the normalised sample covariance."""
    m, M = Z.shape
    mu = Z.mean(axis=1)
    R = Z - mu[:, None]
    S = np.ascontiguousarray(symmetrize(R @ R.T) / config.denominator(M))
    if np.any(np.diag(S) <= 1e-300):
        raise SingularMatrixError("samples are degenerate along some coordinate")
    if config.rho == 0.0:
        theta = np.empty((m, m))
        if not _kernels.spd_inverse(S, theta):
            raise SingularMatrixError(
                f"sample covariance is singular (M={M}, m={m}) and rho = 0")
        return mu, S, np.zeros((m, m)), theta
    W, B = S.copy(), np.zeros((m, m))
    theta = _run_glasso(S, config.rho, W, B, config.glasso_max_iters, config.glasso_tol)
    return mu, W, B, theta


class _EMState:
    """Mutable buffers threaded through the compiled EM loop."""

    def __init__(self, Z, mu, W, B, theta):
        M = Z.shape[1]
        self.Z = Z
        self.mu = np.ascontiguousarray(mu, dtype=float).copy()
        self.W = np.ascontiguousarray(W, dtype=float).copy()
        self.B = np.ascontiguousarray(B, dtype=float).copy()
        self.theta = np.ascontiguousarray(theta, dtype=float).copy()
        self.tau = np.ones(M)
        self.delta = np.zeros(M)

    def copy(self):
        return _EMState(self.Z, self.mu, self.W, self.B, self.theta)

    def run(self, nu, config, max_iters):
        status, iters, converged, resid = _kernels.em_iterations(
            self.Z, float(nu), float(config.rho), config.denominator(self.Z.shape[1]),
            self.mu, self.W, self.B, self.theta, self.tau, self.delta,
            max_iters, config.em_tol, config.glasso_max_iters, config.glasso_tol)
        if status == _kernels.SINGULAR:
            raise SingularMatrixError("weighted scatter matrix is not positive definite")
        if status == _kernels.NO_CONVERGENCE:
            raise ConvergenceError("graphical lasso did not converge inside EM", resid)
        return iters, converged

    def result(self, nu, iterations, converged, saturated=False):
        m = self.Z.shape[0]
        theta = symmetrize(self.theta)
        chol_t = cholesky(theta)
        # scale is the exact inverse of the precision so the pair is consistent
        inv_chol_t = lower_solve(chol_t, np.eye(m))
        scale = symmetrize(inv_chol_t.T @ inv_chol_t)
        w = chol_t.T @ (self.Z - self.mu[:, None])
        delta = np.einsum("ij,ij->j", w, w)
        ll = _loglik_from_delta(delta, -chol_logdet(chol_t), m, nu)
        return TlassoResult(mean=self.mu.copy(), scale=scale, precision=theta, dof=float(nu),
                            weights=_tau(delta, nu, m), iterations=iterations, loglik=ll,
                            converged=converged, dof_saturated=saturated)


def em_step(samples, prev, config):
    """One E-step and M-step starting from the estimate `prev`.

    The weights come from ``prev``; the new mean uses those weights, and the
    new scatter matrix is taken about the new mean before the graphical
    lasso (or a plain inverse when ``rho = 0``) turns it into a precision.
    """
    Z = _as_samples(samples)
    m, M = Z.shape
    nu = prev.dof
    chol = cholesky(prev.scale)
    _, tau = empirical_weights(Z, prev.mean, chol, nu)
    mu = (Z @ tau) / tau.sum()
    R = Z - mu[:, None]
    S = symmetrize((R * tau) @ R.T) / config.denominator(M)
    if config.rho == 0.0:
        chol_s = cholesky(S)
        inv = lower_solve(chol_s, np.eye(m))
        theta = symmetrize(inv.T @ inv)
        scale = S
    else:
        scale, theta = glasso(S, config.rho, config, warm_start=prev.precision)
    return TlassoResult(mean=mu, scale=scale, precision=theta, dof=nu,
                        weights=tau, iterations=prev.iterations + 1,
                        loglik=loglik(Z, mu, scale, nu))


def _fit_fixed(state, nu, config):
    iters, converged = state.run(nu, config, config.max_em_iters)
    return state.result(nu, iters, converged)


def _fit_grid(state, grid, config):
    best = None
    for nu in sorted(grid):
        # candidates are visited in ascending order, each warm-started from the last
        iters, converged = state.run(nu, config, config.max_em_iters)
        fit = state.result(nu, iters, converged)
        if best is None or fit.loglik > best.loglik:
            best = fit
    return best


def _fit_root(state, nu0, config):
    m = state.Z.shape[0]
    nu, saturated = float(nu0), False
    for it in range(1, config.max_em_iters + 1):
        mu_old, W_old = state.mu.copy(), state.W.copy()
        state.run(nu, config, 1)
        # state.delta holds the distances under the previous parameters
        nu_new, saturated = dof_root(state.delta, nu, m, self_consistent=False)
        change = max(np.linalg.norm(state.mu - mu_old) / (1 + np.linalg.norm(state.mu)),
                     np.linalg.norm(state.W - W_old) / (1 + np.linalg.norm(state.W)),
                     abs(nu_new - nu) / (1 + nu_new))
        nu = nu_new
        if change < config.em_tol:
            return state.result(nu, it, True, saturated)
    return state.result(nu, config.max_em_iters, False, saturated)


def tlasso(samples, config=None, init=None):
    """Fit a multivariate t-distribution with a sparse precision matrix.

    Parameters
    ----------
    samples : (m, M) array
        Sample columns, ``M >= 2``.
    config : TlassoConfig, optional
        Penalty, dof policy and iteration controls.
    init : TlassoResult, optional
        Warm start for the mean and precision; the sample mean and the
        graphical lasso of the sample covariance are used otherwise.

    Returns
    -------
    TlassoResult
    """
    config = config or TlassoConfig()
    Z = _as_samples(samples)
    m, M = Z.shape
    if M < 2:
        raise ArgumentError("tlasso needs at least two samples")
    if init is None:
        state = _EMState(Z, *_initial_state(Z, config))
    else:
        _, B = _glasso_start(init.scale, init.precision)
        state = _EMState(Z, init.mean, init.scale, B, init.precision)
    mode = config.dof_mode
    if isinstance(mode, Fixed):
        return _fit_fixed(state, mode.nu, config)
    if isinstance(mode, GridSearch):
        return _fit_grid(state, mode.grid, config)
    return _fit_root(state, mode.nu0, config)
