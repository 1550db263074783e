"""Multivariate Student t-distributions.

A `TDist` is the triple (mean, scale, dof).  ``dof = inf`` is the Gaussian
limit and is handled exactly: every formula branches on it rather than
plugging a large number in.  Samples are stored column-wise, one draw per
column, so a batch of ``K`` points in dimension ``m`` has shape ``(m, K)``.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import optimize, special

from ._linalg import cholesky, chol_logdet, lower_solve, symmetrize
from .errors import ArgumentError, MomentUndefinedError, SingularMatrixError

__all__ = [
    "TDist", "JointSplit", "logpdf", "sample", "mahalanobis",
    "affine_transform", "marginal", "condition", "moments", "quantile1d",
    "expected_alpha", "alpha_factor",
]


def _check_dof(dof):
    dof = float(dof)
    if math.isnan(dof) or dof <= 2.0:
        raise ArgumentError(f"degree of freedom must be > 2, got {dof}")
    return dof


@dataclass(frozen=True, eq=False)
class TDist:
    """Multivariate t-distribution St(mean, scale, dof).

    Parameters
    ----------
    mean : array_like, shape (m,)
    scale : array_like, shape (m, m)
        Symmetric positive definite scale matrix (not the covariance).
    dof : float
        Degree of freedom, ``> 2``; ``math.inf`` encodes the Gaussian.
    """

    mean: np.ndarray
    scale: np.ndarray
    dof: float
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        scale = np.atleast_2d(np.asarray(self.scale, dtype=float)).copy()
        m = mean.shape[0]
        if mean.ndim != 1 or scale.shape != (m, m):
            raise ArgumentError(
                f"mean {mean.shape} and scale {scale.shape} are inconsistent")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(scale))):
            raise ArgumentError("mean and scale must be finite")
        if not np.allclose(scale, scale.T, rtol=1e-10, atol=1e-12 * np.abs(scale).max()):
            raise ArgumentError("scale matrix must be symmetric")
        scale = symmetrize(scale)
        chol = cholesky(scale) if m > 0 else np.zeros((0, 0))
        for arr in (mean, scale, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "dof", _check_dof(self.dof))
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def is_gaussian(self):
        return math.isinf(self.dof)

    @classmethod
    def standard(cls, dim, dof):
        """Zero-mean, identity-scale t-distribution of dimension `dim`."""
        return cls(np.zeros(dim), np.eye(dim), dof)


@dataclass(frozen=True, eq=False)
class JointSplit:
    """A t-distribution over the stacked vector ``(y, x)``, ``y`` first.

    ``d`` is the observation dimension; the state dimension ``n`` is what
    remains.
    """

    dist: TDist
    d: int

    def __post_init__(self):
        if not 0 <= self.d <= self.dist.dim:
            raise ArgumentError(f"d={self.d} out of range for dim {self.dist.dim}")

    @property
    def n(self):
        return self.dist.dim - self.d

    @property
    def mu_y(self):
        return self.dist.mean[:self.d]

    @property
    def mu_x(self):
        return self.dist.mean[self.d:]

    @property
    def scale_y(self):
        return self.dist.scale[:self.d, :self.d]

    @property
    def scale_xy(self):
        return self.dist.scale[self.d:, :self.d]

    @property
    def scale_x(self):
        return self.dist.scale[self.d:, self.d:]

    @classmethod
    def from_blocks(cls, mu_y, mu_x, scale_y, scale_xy, scale_x, dof):
        mean = np.concatenate([np.atleast_1d(mu_y), np.atleast_1d(mu_x)])
        scale_xy = np.atleast_2d(scale_xy)
        scale = np.block([[np.atleast_2d(scale_y), scale_xy.T],
                          [scale_xy, np.atleast_2d(scale_x)]])
        return cls(TDist(mean, scale, dof), len(np.atleast_1d(mu_y)))


def _as_points(dist, x):
    """Return `x` as an (m, K) array plus a flag telling whether it was 1-D."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    pts = x.reshape(-1, 1) if single else x
    if pts.shape[0] != dist.dim:
        raise ArgumentError(f"expected points of dimension {dist.dim}, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise ArgumentError("points must be finite")
    return pts, single


def _mahalanobis_cols(dist, pts):
    w = lower_solve(dist.chol, pts - dist.mean[:, None])
    return np.einsum("ij,ij->j", w, w)


def mahalanobis(dist, x):
    """Squared Mahalanobis distance ``(x - mean)^T scale^{-1} (x - mean)``.

    Accepts one point of shape (m,) or a batch of shape (m, K).
    """
    pts, single = _as_points(dist, x)
    delta = _mahalanobis_cols(dist, pts)
    return float(delta[0]) if single else delta


def logpdf(dist, x):
    """Log density of `dist` at one point or a column batch of points."""
    pts, single = _as_points(dist, x)
    m = dist.dim
    delta = _mahalanobis_cols(dist, pts)
    half_logdet = 0.5 * chol_logdet(dist.chol)
    if dist.is_gaussian:
        out = -0.5 * delta - 0.5 * m * math.log(2.0 * math.pi) - half_logdet
    else:
        nu = dist.dof
        const = (special.gammaln(0.5 * (nu + m)) - special.gammaln(0.5 * nu)
                 - 0.5 * m * math.log(nu * math.pi) - half_logdet)
        out = const - 0.5 * (nu + m) * np.log1p(delta / nu)
    return float(out[0]) if single else out


def sample(dist, count, rng):
    """Draw `count` i.i.d. samples as an (m, count) array.

    Uses the Gaussian scale mixture ``mean + G / sqrt(tau)`` with
    ``G ~ N(0, scale)`` and ``tau ~ Gamma(dof/2, rate=dof/2)``.
    """
    if count < 1:
        raise ArgumentError("count must be >= 1")
    g = dist.chol @ rng.standard_normal((dist.dim, count))
    if not dist.is_gaussian:
        tau = rng.gamma(0.5 * dist.dof, 2.0 / dist.dof, size=count)
        g = g / np.sqrt(tau)
    return dist.mean[:, None] + g


def affine_transform(dist, a, b):
    """Distribution of ``a @ X + b`` for ``X ~ dist``; the dof is unchanged."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape[1] != dist.dim or b.shape != (a.shape[0],):
        raise ArgumentError(f"incompatible shapes {a.shape}, {b.shape} for dim {dist.dim}")
    if np.linalg.matrix_rank(a) < a.shape[0]:
        raise SingularMatrixError("affine map must have full row rank")
    return TDist(a @ dist.mean + b, symmetrize(a @ dist.scale @ a.T), dist.dof)


def marginal(dist, index):
    """Marginal over the coordinates in `index`."""
    index = np.atleast_1d(np.asarray(index, dtype=int))
    return TDist(dist.mean[index], dist.scale[np.ix_(index, index)], dist.dof)


def alpha_factor(dof, delta, d):
    """Conditional scale multiplier ``(dof + delta) / (dof + d)``; 1 when dof is inf."""
    if math.isinf(dof):
        return np.ones_like(np.asarray(delta, dtype=float))[()]
    return (dof + np.asarray(delta, dtype=float)) / (dof + d)


def condition(joint, y):
    """Distribution of the state block given the observation block equals `y`."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d, nu = joint.d, joint.dist.dof
    if y.shape != (d,):
        raise ArgumentError(f"expected observation of length {d}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ArgumentError("observation must be finite")
    if d == 0:
        return TDist(joint.mu_x, joint.scale_x, nu)
    chol_y = cholesky(joint.scale_y)
    w = lower_solve(chol_y, y - joint.mu_y)
    v = lower_solve(chol_y, joint.scale_xy.T)      # L_Y^{-1} C_YX
    mean = joint.mu_x + v.T @ w
    schur = symmetrize(joint.scale_x - v.T @ v)
    try:
        np.linalg.cholesky(schur)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("Schur complement is not positive definite") from None
    alpha = float(alpha_factor(nu, w @ w, d))
    return TDist(mean, alpha * schur, nu + d)


def moments(dist):
    """Mean vector and covariance matrix ``dof / (dof - 2) * scale``."""
    if dist.is_gaussian:
        return dist.mean.copy(), dist.scale.copy()
    if dist.dof <= 2.0:
        raise MomentUndefinedError(f"covariance undefined for dof={dist.dof}")
    return dist.mean.copy(), dist.dof / (dist.dof - 2.0) * dist.scale


def _std_t_cdf(q, nu):
    if math.isinf(nu):
        return special.ndtr(q)
    return special.stdtr(nu, q)


def quantile1d(nu, p):
    """`p`-quantile of the standard univariate t-distribution with `nu` dof.

    Bisection on the CDF over a bracket grown geometrically from [-1, 1].
    """
    if not 0.0 < p < 1.0:
        raise ArgumentError(f"p must lie in (0, 1), got {p}")
    nu = float(nu)
    if nu < 1.0:
        raise ArgumentError(f"nu must be >= 1, got {nu}")
    if p == 0.5:
        return 0.0
    lo, hi = -1.0, 1.0
    while _std_t_cdf(lo, nu) > p:
        lo *= 2.0
    while _std_t_cdf(hi, nu) < p:
        hi *= 2.0
    return optimize.bisect(lambda q: _std_t_cdf(q, nu) - p, lo, hi, xtol=1e-10)


def expected_alpha(nu, d):
    """Mean of the conditional scale multiplier when ``y`` is drawn from its marginal."""
    nu = float(nu)
    if nu <= 2.0:
        raise ArgumentError(f"nu must be > 2, got {nu}")
    if d < 1:
        raise ArgumentError("d must be >= 1")
    if math.isinf(nu):
        return 1.0
    return (nu + nu * d / (nu - 2.0)) / (nu + d)
