"""Lower-triangular transport maps for joint t-distributions.

For a joint t-distribution over ``(y, x)`` the Knothe-Rosenblatt
rearrangement to the standard reference is affine in ``x`` given ``y``.
Composing the forward map at a synthetic observation ``y_i`` with its
inverse at the realised observation ``y*`` gives the analysis map

    T(y_i, x_i) = mu_x + K (y* - mu_y)
                  + sqrt(alpha(y*) / alpha(y_i)) * [(x_i - mu_x) - K (y_i - mu_y)]

with gain ``K = C_xy C_y^{-1}`` and ``alpha(y) = (nu + delta_y(y)) / (nu + d)``.
The conditional Cholesky factors cancel to the scalar ratio, so applying
the map only needs the observation block factor.  With ``nu = inf`` the
ratio is one and the map is the stochastic Kalman update.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from ._linalg import cholesky, lower_solve, symmetrize, upper_solve_t
from .errors import ArgumentError, SingularMatrixError
from .tdist import JointSplit, TDist, alpha_factor

__all__ = [
    "AnalysisMapT", "KRMapT", "build_analysis_map", "build_kr_map",
    "kr_forward", "apply_analysis", "kalman_apply", "pushforward_stats",
]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AnalysisMapT:
    """Parameters of the analysis map built from a joint t-distribution.

    Attributes
    ----------
    mu_y, mu_x : mean blocks.
    chol_y : lower Cholesky factor of the observation scale block.
    cross : state-observation scale block ``C_xy`` of shape (n, d).
    dof : degree of freedom of the joint; ``inf`` gives the Kalman map.
    """

    mu_y: np.ndarray
    mu_x: np.ndarray
    chol_y: np.ndarray
    cross: np.ndarray
    dof: float

    @property
    def d(self):
        return self.mu_y.shape[0]

    @property
    def n(self):
        return self.mu_x.shape[0]

    @property
    def is_gaussian(self):
        return math.isinf(self.dof)

    @property
    def gain(self):
        """Kalman gain ``C_xy C_y^{-1}`` (computed on demand, for inspection)."""
        v = lower_solve(self.chol_y, self.cross.T)
        return upper_solve_t(self.chol_y, v).T

    def whiten(self, y):
        """``L_y^{-1} (y - mu_y)`` for a vector or a (d, K) batch."""
        y = np.asarray(y, dtype=float)
        shift = self.mu_y if y.ndim == 1 else self.mu_y[:, None]
        return lower_solve(self.chol_y, y - shift)


@dataclass(frozen=True, eq=False)
class KRMapT(AnalysisMapT):
    """Analysis map plus the state-block factor of the triangular map.

    ``schur_factor`` is the lower-triangular ``S`` with
    ``S^T S = (C_x - C_xy C_y^{-1} C_yx)^{-1}``.
    """

    schur: np.ndarray = field(default=None)
    schur_factor: np.ndarray = field(default=None)


def _blocks(joint):
    if not isinstance(joint, JointSplit):
        raise ArgumentError("expected a JointSplit")
    if joint.d < 1 or joint.n < 1:
        raise ArgumentError("both observation and state blocks must be non-empty")
    return joint


def build_analysis_map(joint):
    """Cache the factors needed to apply the analysis map of `joint`."""
    joint = _blocks(joint)
    chol_y = cholesky(joint.scale_y)
    return AnalysisMapT(_frozen(joint.mu_y), _frozen(joint.mu_x), _frozen(chol_y),
                        _frozen(joint.scale_xy), joint.dist.dof)


def build_kr_map(joint):
    """Analysis map together with the conditional (Schur) factor."""
    base = build_analysis_map(joint)
    v = lower_solve(base.chol_y, base.cross.T)
    schur = symmetrize(joint.scale_x - v.T @ v)
    try:
        chol_s = np.linalg.cholesky(schur)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("Schur complement is not positive definite") from None
    factor = lower_solve(chol_s, np.eye(base.n))
    return KRMapT(base.mu_y, base.mu_x, base.chol_y, base.cross, base.dof,
                  schur=_frozen(schur), schur_factor=_frozen(factor))


def _vec(v, size, name):
    v = np.asarray(v, dtype=float)
    if v.shape[0] != size:
        raise ArgumentError(f"{name} has leading dimension {v.shape[0]}, expected {size}")
    return v


def kr_forward(kr, y, x):
    """Push ``(y, x)`` to the reference variables ``(z1, z2)``.

    ``z1 = L_y^{-1} (y - mu_y)`` depends on ``y`` only;
    ``z2 = S / sqrt(alpha(y)) [(x - mu_x) - K (y - mu_y)]``.
    Accepts single vectors or column batches.
    """
    if not isinstance(kr, KRMapT):
        raise ArgumentError("kr_forward needs a KRMapT (see build_kr_map)")
    y = _vec(y, kr.d, "y")
    x = _vec(x, kr.n, "x")
    z1 = kr.whiten(y)
    b = upper_solve_t(kr.chol_y, z1)                      # C_y^{-1}(y - mu_y)
    shift = kr.mu_x if x.ndim == 1 else kr.mu_x[:, None]
    resid = (x - shift) - kr.cross @ b
    z2 = kr.schur_factor @ resid
    if not kr.is_gaussian:
        delta = np.sum(z1 * z1, axis=0)
        z2 = z2 / np.sqrt(alpha_factor(kr.dof, delta, kr.d))
    return z1, z2


def _analysis(amap, y_star, y_i, x_i, scaled):
    y_star = _vec(y_star, amap.d, "y_star")
    if y_star.ndim != 1:
        raise ArgumentError("y_star must be a single observation vector")
    y_i = _vec(y_i, amap.d, "y_i")
    x_i = _vec(x_i, amap.n, "x_i")
    if (y_i.ndim == 2) != (x_i.ndim == 2) or (y_i.ndim == 2 and y_i.shape[1] != x_i.shape[1]):
        raise ArgumentError("y_i and x_i must both be vectors or batches of equal size")
    z_star = amap.whiten(y_star)
    z_i = amap.whiten(y_i)
    if not scaled or amap.is_gaussian:
        # x_i - K (y_i - y*), both representers share one back-substitution
        zdiff = z_i - (z_star if z_i.ndim == 1 else z_star[:, None])
        return x_i - amap.cross @ upper_solve_t(amap.chol_y, zdiff)
    b_star = upper_solve_t(amap.chol_y, z_star)
    b_i = upper_solve_t(amap.chol_y, z_i)
    nu = amap.dof
    delta_star = z_star @ z_star
    delta_i = np.sum(z_i * z_i, axis=0)
    ratio = np.exp(0.5 * (math.log(nu + delta_star) - np.log(nu + delta_i)))
    post_mean = amap.mu_x + amap.cross @ b_star
    if x_i.ndim == 1:
        return post_mean + ratio * ((x_i - amap.mu_x) - amap.cross @ b_i)
    dev = (x_i - amap.mu_x[:, None]) - amap.cross @ b_i
    return post_mean[:, None] + ratio[None, :] * dev


def apply_analysis(amap, y_star, y_i, x_i):
    """Transport prior pairs ``(y_i, x_i)`` to posterior samples given ``y_star``.

    `y_i` and `x_i` may be single vectors or (d, M) / (n, M) batches.
    """
    return _analysis(amap, y_star, y_i, x_i, scaled=True)


def kalman_apply(amap, y_star, y_i, x_i):
    """Stochastic Kalman update ``x_i - K (y_i - y_star)``."""
    return _analysis(amap, y_star, y_i, x_i, scaled=False)


def pushforward_stats(kr, y_star, kalman=False):
    """Distribution the analysis map pushes the prior onto.

    The mean is the conditional mean; the scale is the Schur complement
    multiplied by ``alpha(y_star)`` and the dof grows by ``d``.  With
    ``kalman=True`` (or an infinite-dof map) the unscaled Schur complement
    and unchanged dof are returned instead.
    """
    if not isinstance(kr, KRMapT):
        raise ArgumentError("pushforward_stats needs a KRMapT (see build_kr_map)")
    y_star = _vec(y_star, kr.d, "y_star")
    z = kr.whiten(y_star)
    mean = kr.mu_x + kr.cross @ upper_solve_t(kr.chol_y, z)
    if kalman or kr.is_gaussian:
        return TDist(mean, kr.schur, kr.dof)
    alpha = float(alpha_factor(kr.dof, z @ z, kr.d))
    return TDist(mean, alpha * kr.schur, kr.dof + kr.d)
