"""Ensemble analysis steps: stochastic EnKF, its glasso variant and the robust filter.

Every analysis takes an `EnsembleState` and returns a new one; inputs are
never modified.  Ensembles are ``(n, M)`` arrays with one particle per column.

The robust filter (EnRF) estimates a joint t-distribution of synthetic
observations and forecast states with `tlasso` and moves each particle with
the closed-form analysis map of `transport`.  Its degree-of-freedom policy
decides how often the dof is re-estimated:

* `ConstDof`    - a fixed value, e.g. 100 or ``inf`` (the Kalman limit);
* `FreeRunDof`  - estimated once from a free run of the model;
* `RefreshDof`  - re-estimated on a buffer of past joint samples every
  ``interval`` cycles once the buffer is full;
* `AdaptDof`    - re-estimated by grid search at every cycle.
"""

from dataclasses import dataclass, field, replace
import math
from typing import NamedTuple, Optional, Union

import numpy as np

from ._linalg import cholesky, lower_solve, upper_solve_t, symmetrize
from .dynamics import free_run, observe
from .errors import ArgumentError
from .estimation import (DEFAULT_DOF_GRID, Fixed, GridSearch, TlassoConfig,
                         default_rho, glasso, tlasso)
from .tdist import JointSplit, TDist
from .transport import apply_analysis, build_analysis_map, kalman_apply

__all__ = [
    "EnsembleState", "ConstDof", "FreeRunDof", "RefreshDof", "AdaptDof",
    "SEnKF", "SEnKFGlasso", "EnRF", "DofBuffer", "RingGeometry", "AnalysisResult",
    "apply_inflation", "gaspari_cohn", "localize_covariance", "senkf_analysis",
    "senkf_glasso_analysis", "enrf_analysis", "update_dof_buffer", "free_run_dof",
    "initial_buffer", "assimilate",
]

HYBRID_DOF_THRESHOLD = 40.0


@dataclass(frozen=True, eq=False)
class EnsembleState:
    particles: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        p = np.array(self.particles, dtype=float)
        if p.ndim != 2 or p.shape[1] < 2:
            raise ArgumentError(f"ensemble must be (n, M) with M >= 2, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ArgumentError("ensemble contains non-finite entries")
        p.setflags(write=False)
        object.__setattr__(self, "particles", p)

    @property
    def n(self):
        return self.particles.shape[0]

    @property
    def M(self):
        return self.particles.shape[1]

    def mean(self):
        return self.particles.mean(axis=1)

    def covariance(self):
        return np.cov(self.particles, ddof=1)


# ---------------------------------------------------------------------------
# filter descriptions

@dataclass(frozen=True)
class ConstDof:
    nu: float


@dataclass(frozen=True)
class FreeRunDof:
    """Dof estimated once by grid search on a free run of `steps` model steps."""
    steps: int = 500
    grid: tuple = DEFAULT_DOF_GRID


@dataclass(frozen=True)
class RefreshDof:
    """Dof re-estimated on a sample buffer every `interval` cycles (``inf`` never)."""
    interval: float = 20
    capacity: int = 500
    free_run_steps: int = 500
    grid: tuple = DEFAULT_DOF_GRID

    def __post_init__(self):
        if self.capacity < 2:
            raise ArgumentError("buffer capacity must be >= 2")
        if not self.interval >= 1:
            raise ArgumentError("refresh interval must be >= 1")


@dataclass(frozen=True)
class AdaptDof:
    grid: tuple = DEFAULT_DOF_GRID


DofPolicy = Union[ConstDof, FreeRunDof, RefreshDof, AdaptDof]


def _check_inflation(alpha):
    if not 0.9 <= alpha <= 1.5:
        raise ArgumentError(f"inflation must lie in [0.9, 1.5], got {alpha}")


@dataclass(frozen=True)
class SEnKF:
    """Stochastic EnKF with multiplicative inflation and optional localization."""
    inflation: float = 1.0
    radius: float = math.inf
    name: str = "senkf"

    def __post_init__(self):
        _check_inflation(self.inflation)
        if not self.radius > 0:
            raise ArgumentError("localization radius must be positive")


@dataclass(frozen=True)
class SEnKFGlasso:
    """Stochastic EnKF whose covariance blocks come from the graphical lasso."""
    inflation: float = 1.0
    rho: Optional[float] = None
    rho_c: float = 0.5
    name: str = "senkf-glasso"

    def __post_init__(self):
        _check_inflation(self.inflation)
        if self.rho is not None and self.rho < 0:
            raise ArgumentError("rho must be >= 0")

    def penalty(self, M):
        return default_rho(M, self.rho_c) if self.rho is None else self.rho


@dataclass(frozen=True)
class EnRF:
    """Ensemble robust filter; never inflated."""
    dof_policy: DofPolicy = field(default_factory=AdaptDof)
    rho: Optional[float] = None
    rho_c: float = 0.5
    hybrid: bool = False
    name: str = "enrf"
    max_em_iters: int = 200
    em_tol: float = 1e-6

    def __post_init__(self):
        if self.rho is not None and self.rho < 0:
            raise ArgumentError("rho must be >= 0")

    def penalty(self, M):
        return default_rho(M, self.rho_c) if self.rho is None else self.rho

    def tlasso_config(self, M, dof_mode):
        return TlassoConfig(rho=self.penalty(M), dof_mode=dof_mode,
                            max_em_iters=self.max_em_iters, em_tol=self.em_tol)


FilterSpec = Union[SEnKF, SEnKFGlasso, EnRF]


# ---------------------------------------------------------------------------
# inflation and localization

def apply_inflation(state, alpha):
    """Scale deviations from the ensemble mean by ``sqrt(alpha)``."""
    if not alpha > 0:
        raise ArgumentError("inflation factor must be positive")
    if alpha == 1.0:
        return state
    X = state.particles
    mean = X.mean(axis=1, keepdims=True)
    return EnsembleState(mean + math.sqrt(alpha) * (X - mean), state.time_index)


@dataclass(frozen=True)
class RingGeometry:
    """Integer positions on a periodic ring of `period` sites."""
    period: int

    def distance(self, a, b):
        a = np.asarray(a)[:, None]
        b = np.asarray(b)[None, :]
        d = np.abs(a - b) % self.period
        return np.minimum(d, self.period - d).astype(float)


def gaspari_cohn(dist, radius):
    """Gaspari-Cohn fifth-order taper with half-width `radius` (zero beyond 2 * radius)."""
    r = np.abs(np.asarray(dist, dtype=float)) / radius
    out = np.zeros_like(r)
    inner = r <= 1.0
    outer = (r > 1.0) & (r < 2.0)
    ri = r[inner]
    out[inner] = (((-0.25 * ri + 0.5) * ri + 0.625) * ri - 5.0 / 3.0) * ri ** 2 + 1.0
    ro = r[outer]
    out[outer] = ((((ro / 12.0 - 0.5) * ro + 0.625) * ro + 5.0 / 3.0) * ro - 5.0) * ro \
        + 4.0 - 2.0 / (3.0 * ro)
    return out


def localize_covariance(cov, radius, geometry, rows=None, cols=None):
    """Multiply `cov` elementwise by the Gaspari-Cohn taper of the ring distances.

    `rows` and `cols` give the ring positions of the row and column
    variables (default ``0, 1, ...``); ``radius = inf`` returns `cov`.
    """
    if not radius > 0:
        raise ArgumentError("localization radius must be positive")
    cov = np.asarray(cov, dtype=float)
    if math.isinf(radius):
        return cov.copy()
    rows = np.arange(cov.shape[0]) if rows is None else rows
    cols = np.arange(cov.shape[1]) if cols is None else cols
    return cov * gaspari_cohn(geometry.distance(rows, cols), radius)


# ---------------------------------------------------------------------------
# stochastic EnKF

def _gain_update(X, Y, y_star, cov_xy, cov_y):
    """``X - cov_xy cov_y^{-1} (Y - y_star)`` via a Cholesky solve."""
    chol = cholesky(symmetrize(cov_y))
    innov = upper_solve_t(chol, lower_solve(chol, Y - y_star[:, None]))
    return X - cov_xy @ innov


def senkf_analysis(state, synthetic_obs, y_star, spec=None, geometry=None, obs_positions=None):
    """Stochastic EnKF update with empirical (optionally localized) covariances.

    Parameters
    ----------
    state : EnsembleState
        Forecast ensemble (already inflated if inflation is wanted).
    synthetic_obs : (d, M) array
        Column i drawn from the likelihood at particle i.
    y_star : (d,) array
        Realised observation.
    spec : SEnKF, optional
        Supplies the localization radius.
    geometry, obs_positions :
        Ring geometry and the ring positions of the observed components,
        needed only when the radius is finite.
    """
    X = state.particles
    Y = np.asarray(synthetic_obs, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    M = state.M
    if Y.shape != (y_star.shape[0], M):
        raise ArgumentError(f"synthetic observations must be (d, M), got {Y.shape}")
    A = X - X.mean(axis=1, keepdims=True)
    B = Y - Y.mean(axis=1, keepdims=True)
    cov_xy = A @ B.T / (M - 1)
    cov_y = B @ B.T / (M - 1)
    radius = math.inf if spec is None else getattr(spec, "radius", math.inf)
    if not math.isinf(radius):
        if geometry is None:
            raise ArgumentError("localization needs a geometry")
        pos = np.arange(Y.shape[0]) if obs_positions is None else obs_positions
        cov_xy = localize_covariance(cov_xy, radius, geometry, np.arange(state.n), pos)
        cov_y = localize_covariance(cov_y, radius, geometry, pos, pos)
    return EnsembleState(_gain_update(X, Y, y_star, cov_xy, cov_y), state.time_index)


def senkf_glasso_analysis(state, synthetic_obs, y_star, spec):
    """Stochastic EnKF update with covariance blocks from the graphical lasso.

    The joint sample covariance of ``(y, x)`` is regularised by `glasso`
    with penalty ``spec.penalty(M)``; its observation and cross blocks
    replace the empirical ones.
    """
    X = state.particles
    Y = np.asarray(synthetic_obs, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    d, M = Y.shape
    Z = np.vstack([Y, X])
    R = Z - Z.mean(axis=1, keepdims=True)
    S = symmetrize(R @ R.T / (M - 1))
    W, _ = glasso(S, spec.penalty(M))
    return EnsembleState(_gain_update(X, Y, y_star, W[d:, :d], W[:d, :d]), state.time_index)


# ---------------------------------------------------------------------------
# dof buffer

@dataclass(frozen=True, eq=False)
class DofBuffer:
    """Ring buffer of raw joint ``(y, x)`` columns and the current dof estimate.

    ``count`` is the number of columns written so far (saturating use of the
    ring starts once ``count >= capacity``); ``last_refresh`` is the cycle of
    the last re-estimate, or of the moment the buffer first filled.
    """

    columns: np.ndarray
    nu: float
    count: int = 0
    last_refresh: Optional[int] = None
    refreshes: int = 0

    @property
    def capacity(self):
        return self.columns.shape[1]

    @property
    def full(self):
        return self.count >= self.capacity

    def samples(self):
        """Stored columns, oldest first."""
        if not self.full:
            return self.columns[:, :self.count]
        start = self.count % self.capacity
        return np.concatenate([self.columns[:, start:], self.columns[:, :start]], axis=1)


def initial_buffer(dim, capacity, nu):
    return DofBuffer(np.zeros((dim, capacity)), float(nu))


def _push(buffer, Z):
    cols = buffer.columns.copy()
    cap = buffer.capacity
    k = Z.shape[1]
    if k >= cap:
        # only the newest `cap` columns survive; keep ring position consistent
        Z = Z[:, k - cap:]
        start = (buffer.count + k - cap) % cap
        idx = (start + np.arange(cap)) % cap
    else:
        idx = (buffer.count + np.arange(k)) % cap
    cols[:, idx] = Z
    return replace(buffer, columns=cols, count=buffer.count + k)


def update_dof_buffer(buffer, joint_samples, time_index, spec, estimator=None):
    """Append joint samples and re-estimate the dof when a refresh is due.

    A refresh happens when the buffer is full and ``time_index`` has reached
    ``last_refresh + interval``.  The first time the buffer fills only the
    clock is started.  `estimator` maps a sample matrix to a dof and defaults
    to grid-search `tlasso` with the filter's penalty.
    """
    policy = spec.dof_policy
    if not isinstance(policy, RefreshDof):
        raise ArgumentError("update_dof_buffer needs a RefreshDof policy")
    Z = np.asarray(joint_samples, dtype=float)
    buf = _push(buffer, Z)
    if not buf.full:
        return buf
    if buf.last_refresh is None:
        return replace(buf, last_refresh=time_index)
    if math.isinf(policy.interval) or time_index < buf.last_refresh + policy.interval:
        return buf
    if estimator is None:
        cfg = spec.tlasso_config(buf.capacity, GridSearch(policy.grid))
        estimator = lambda S: tlasso(S, cfg).dof
    return replace(buf, nu=float(estimator(buf.samples())), last_refresh=time_index,
                   refreshes=buf.refreshes + 1)


def free_run_dof(model, steps, rng, spec, grid=DEFAULT_DOF_GRID):
    """Grid-search dof of the joint ``(y, x)`` samples from a model free run."""
    x0 = rng.standard_normal(model.n)
    Y, X = free_run(model, x0, steps, rng)
    cfg = spec.tlasso_config(steps, GridSearch(grid))
    return tlasso(np.vstack([Y, X]), cfg).dof


# ---------------------------------------------------------------------------
# robust filter

class AnalysisResult(NamedTuple):
    state: EnsembleState
    dof: float
    buffer: Optional[DofBuffer]


def enrf_analysis(state, likelihood_sampler, y_star, spec, dof_buffer=None, rng=None):
    """One analysis step of the ensemble robust filter.

    1. draw synthetic observations ``y_i ~ likelihood_sampler(x_i)``;
    2. fit a t-distribution to the joint samples ``(y_i, x_i)`` with `tlasso`,
       the dof coming from the filter's policy;
    3. move every particle with the analysis map of the fitted joint.

    Parameters
    ----------
    likelihood_sampler : callable
        Maps the (n, M) forecast ensemble to a (d, M) array of synthetic
        observations.
    dof_buffer : DofBuffer
        Required for `FreeRunDof` and `RefreshDof` policies; holds the
        current dof estimate.
    rng : numpy Generator, unused
        Accepted for signature symmetry; randomness lives in the sampler.

    Returns
    -------
    AnalysisResult
        ``(state, dof, buffer)`` with the dof used by the map.
    """
    X = state.particles
    M = state.M
    Y = np.asarray(likelihood_sampler(X), dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    if Y.ndim != 2 or Y.shape != (y_star.shape[0], M):
        raise ArgumentError(f"likelihood sampler returned shape {Y.shape}")
    d = Y.shape[0]
    Z = np.vstack([Y, X])
    policy = spec.dof_policy
    buffer = dof_buffer
    if isinstance(policy, ConstDof):
        mode = Fixed(policy.nu)
    elif isinstance(policy, AdaptDof):
        mode = GridSearch(policy.grid)
    else:
        if buffer is None:
            raise ArgumentError(f"{type(policy).__name__} needs a DofBuffer")
        if isinstance(policy, RefreshDof):
            buffer = update_dof_buffer(buffer, Z, state.time_index, spec)
        mode = Fixed(buffer.nu)
    fit = tlasso(Z, spec.tlasso_config(M, mode))
    joint = JointSplit(TDist(fit.mean, fit.scale, fit.dof), d)
    amap = build_analysis_map(joint)
    if spec.hybrid and fit.dof > HYBRID_DOF_THRESHOLD:
        Xa = kalman_apply(amap, y_star, Y, X)
    else:
        Xa = apply_analysis(amap, y_star, Y, X)
    return AnalysisResult(EnsembleState(Xa, state.time_index), fit.dof, buffer)


def assimilate(state, y_star, model, spec, rng, buffer=None, geometry=None):
    """Analysis step for any filter spec, drawing synthetic observations from `model`.

    Inflation (sEnKF variants only) is applied to the forecast before the
    synthetic observations are drawn.  Returns an `AnalysisResult`; the dof
    is ``nan`` for the Kalman-type filters.
    """
    sampler = lambda X: observe(model, X, rng)
    if isinstance(spec, EnRF):
        return enrf_analysis(state, sampler, y_star, spec, buffer, rng)
    state = apply_inflation(state, spec.inflation)
    Y = sampler(state.particles)
    if isinstance(spec, SEnKFGlasso):
        out = senkf_glasso_analysis(state, Y, y_star, spec)
    elif isinstance(spec, SEnKF):
        out = senkf_analysis(state, Y, y_star, spec, geometry, model.obs_index)
    else:
        raise ArgumentError(f"unknown filter spec {spec!r}")
    return AnalysisResult(out, math.nan, None)
