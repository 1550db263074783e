"""Chaotic test models, an adaptive Runge-Kutta integrator and observation models.

States are column vectors: a single state has shape ``(n,)`` and an ensemble
has shape ``(n, M)``.  Right-hand sides accept either and the integrator
advances a whole ensemble with one shared step-size sequence.
"""

from dataclasses import dataclass, field
import math
from typing import NamedTuple, Union

import numpy as np

from .errors import ArgumentError, StiffnessError

__all__ = [
    "Lorenz63", "Lorenz96", "lorenz63_rhs", "lorenz96_rhs", "integrate",
    "IntegrationStats", "GaussianNoise", "StudentTNoise", "StateSpaceModel",
    "forecast_step", "observe", "free_run", "lorenz63_model", "lorenz96_model",
]


def lorenz63_rhs(x, sigma=10.0, beta=8.0 / 3.0, rho=28.0):
    """Lorenz-63 vector field for a state or a (3, M) ensemble.

    ``(sigma (x2 - x1), x1 (rho - x3) - x2, x1 x2 - beta x3)``.  The middle
    component uses ``x3``; with ``x2`` in its place trajectories leave every
    bounded region within a few time units.
    """
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[0], x[1], x[2]
    return np.stack([sigma * (x2 - x1), x1 * (rho - x3) - x2, x1 * x2 - beta * x3])


def lorenz96_rhs(x, F=8.0):
    """Lorenz-96 vector field ``(x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`` on a ring."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 4:
        raise ArgumentError(f"Lorenz-96 needs at least 4 variables, got {x.shape[0]}")
    return (np.roll(x, -1, axis=0) - np.roll(x, 2, axis=0)) * np.roll(x, 1, axis=0) - x + F


@dataclass(frozen=True)
class Lorenz63:
    sigma: float = 10.0
    beta: float = 8.0 / 3.0
    rho: float = 28.0

    @property
    def dim(self):
        return 3

    def __call__(self, t, x):
        return lorenz63_rhs(x, self.sigma, self.beta, self.rho)


@dataclass(frozen=True)
class Lorenz96:
    F: float = 8.0
    n: int = 20

    def __post_init__(self):
        if self.n < 4:
            raise ArgumentError(f"Lorenz-96 needs n >= 4, got {self.n}")

    @property
    def dim(self):
        return self.n

    def __call__(self, t, x):
        return lorenz96_rhs(x, self.F)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

# PI step-size control
_SAFETY = 0.9
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA
_FAC_MIN, _FAC_MAX = 0.2, 10.0


class IntegrationStats(NamedTuple):
    accepted: int
    rejected: int


def _stages(f, t, x, h, k1):
    k = [k1]
    for s in range(1, 7):
        xs = x + h * sum(a * ks for a, ks in zip(_A[s], k) if a != 0.0)
        k.append(f(t + _C[s] * h, xs))
    x_new = x + h * sum(b * ks for b, ks in zip(_B5, k) if b != 0.0)
    err = h * sum(e * ks for e, ks in zip(_E, k) if e != 0.0)
    return x_new, err, k[6]


def _error_norm(err, x, x_new, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
    ratio = (err / scale) ** 2
    if ratio.ndim == 1:
        return math.sqrt(ratio.mean())
    return math.sqrt(ratio.mean(axis=0).max())


def _initial_step(f, t0, x0, k1, atol, rtol, span):
    scale = atol + rtol * np.abs(x0)
    d0 = np.sqrt(np.mean((x0 / scale) ** 2))
    d1 = np.sqrt(np.mean((k1 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    k2 = f(t0 + h0, x0 + h0 * k1)
    d2 = np.sqrt(np.mean(((k2 - k1) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def integrate(rhs, x0, t0, t1, tol=(1e-8, 1e-8), step=None, max_steps=100_000,
              return_stats=False):
    """Integrate ``dx/dt = rhs(t, x)`` from `t0` to `t1` with Dormand-Prince 5(4).

    Parameters
    ----------
    rhs : callable ``rhs(t, x)``
        Must accept a state ``(n,)`` or an ensemble ``(n, M)``.
    x0 : array_like
        Initial state or ensemble.
    tol : (atol, rtol)
        Local error tolerance.  For an ensemble the step is accepted when
        every member's scaled RMS error is at most one.
    step : float, optional
        Take fixed steps of (at most) this size instead of adapting.
    return_stats : bool
        Also return accepted/rejected step counts.
    """
    x = np.array(x0, dtype=float)
    if t1 < t0:
        raise ArgumentError("integration runs forward in time only")
    atol, rtol = tol
    stats = [0, 0]
    span = t1 - t0
    if span == 0.0:
        return (x, IntegrationStats(0, 0)) if return_stats else x
    t = t0
    k1 = rhs(t, x)
    if step is not None:
        n_steps = max(1, math.ceil(span / step - 1e-12))
        h = span / n_steps
        for _ in range(n_steps):
            x, _, k1 = _stages(rhs, t, x, h, k1)
            t += h
        stats[0] = n_steps
        return (x, IntegrationStats(*stats)) if return_stats else x

    h = _initial_step(rhs, t0, x, k1, atol, rtol, span)
    err_prev = 1.0
    while t < t1:
        if stats[0] + stats[1] >= max_steps:
            raise StiffnessError(f"exceeded {max_steps} steps at t={t:.6g}")
        if h < 1e-14 * max(1.0, abs(t)):
            raise StiffnessError(f"step size underflow at t={t:.6g}")
        h_try = min(h, t1 - t)
        x_new, err, k7 = _stages(rhs, t, x, h_try, k1)
        en = _error_norm(err, x, x_new, atol, rtol)
        if not math.isfinite(en):
            stats[1] += 1
            h = h_try * _FAC_MIN
            continue
        if en <= 1.0:
            fac = _SAFETY * max(en, 1e-10) ** (-_ALPHA) * err_prev ** _BETA
            fac = min(_FAC_MAX, max(_FAC_MIN, fac))
            t = t1 if h_try == t1 - t else t + h_try
            x, k1 = x_new, k7
            err_prev = max(en, 1e-4)
            stats[0] += 1
            h = h_try * fac
        else:
            stats[1] += 1
            h = h_try * max(_FAC_MIN, _SAFETY * en ** (-_ALPHA))
    return (x, IntegrationStats(*stats)) if return_stats else x


# ---------------------------------------------------------------------------
# state-space model

@dataclass(frozen=True)
class GaussianNoise:
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ArgumentError("noise variance must be positive")


@dataclass(frozen=True)
class StudentTNoise:
    """Isotropic t noise St(0, scale2 * I, dof)."""
    scale2: float
    dof: float

    def __post_init__(self):
        if not self.scale2 > 0:
            raise ArgumentError("noise scale must be positive")
        if not self.dof > 2:
            raise ArgumentError("noise dof must be > 2")


ObsNoise = Union[GaussianNoise, StudentTNoise, None]

IDENTITY = "identity"
EVERY_OTHER = "every_other"


@dataclass(frozen=True)
class StateSpaceModel:
    """``X_{t+1} = f(X_t) + W_t`` and ``Y_t = h(X_t) + E_t``.

    `obs_noise` set to None observes ``h(x)`` exactly.
    """

    rhs: Union[Lorenz63, Lorenz96]
    dt_obs: float
    process_noise_var: float = 1e-4
    obs_operator: str = IDENTITY
    obs_noise: ObsNoise = None
    integrator_tol: tuple = (1e-8, 1e-8)
    obs_index: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.dt_obs > 0:
            raise ArgumentError("dt_obs must be positive")
        if self.process_noise_var < 0:
            raise ArgumentError("process noise variance must be >= 0")
        n = self.rhs.dim
        if self.obs_operator == IDENTITY:
            index = np.arange(n)
        elif self.obs_operator == EVERY_OTHER:
            index = np.arange(0, n, 2)
        else:
            raise ArgumentError(f"unknown observation operator {self.obs_operator!r}")
        index.setflags(write=False)
        object.__setattr__(self, "obs_index", index)

    @property
    def n(self):
        return self.rhs.dim

    @property
    def d(self):
        return self.obs_index.shape[0]

    def h(self, x):
        return np.asarray(x)[self.obs_index]

    def obs_noise_cov(self):
        """Covariance matrix of the observation noise (zeros when noiseless)."""
        noise = self.obs_noise
        if noise is None:
            return np.zeros((self.d, self.d))
        if isinstance(noise, GaussianNoise):
            return noise.var * np.eye(self.d)
        return noise.scale2 * noise.dof / (noise.dof - 2) * np.eye(self.d)


def lorenz63_model(obs_noise, process_noise_var=1e-4, dt_obs=0.1, tol=(1e-8, 1e-8)):
    return StateSpaceModel(Lorenz63(), dt_obs, process_noise_var, IDENTITY, obs_noise, tol)


def lorenz96_model(obs_noise, n=20, F=8.0, process_noise_var=1e-4, dt_obs=0.4,
                   tol=(1e-8, 1e-8)):
    return StateSpaceModel(Lorenz96(F, n), dt_obs, process_noise_var, EVERY_OTHER,
                           obs_noise, tol)


def forecast_step(model, x, rng):
    """Advance a state or ensemble by one observation interval and add process noise."""
    x = integrate(model.rhs, x, 0.0, model.dt_obs, model.integrator_tol)
    if model.process_noise_var > 0:
        x = x + math.sqrt(model.process_noise_var) * rng.standard_normal(x.shape)
    return x


def observe(model, x, rng):
    """Noisy observation of a state (returns (d,)) or of each ensemble column."""
    y = model.h(x).astype(float)
    noise = model.obs_noise
    if noise is None:
        return y
    g = rng.standard_normal(y.shape)
    if isinstance(noise, GaussianNoise):
        return y + math.sqrt(noise.var) * g
    count = 1 if y.ndim == 1 else y.shape[1]
    tau = rng.gamma(0.5 * noise.dof, 2.0 / noise.dof, size=count)
    g = g / (np.sqrt(tau) if y.ndim == 2 else math.sqrt(tau[0]))
    return y + math.sqrt(noise.scale2) * g


def free_run(model, x0, steps, rng):
    """Simulate `steps` forecast/observe cycles from `x0`.

    The dynamics and the observations draw from two child streams spawned
    from `rng`, so changing the observation model leaves the state path
    unchanged.

    Returns
    -------
    Y : (d, steps) observations
    X : (n, steps) states
    """
    if steps < 1:
        raise ArgumentError("steps must be >= 1")
    dyn_rng, obs_rng = rng.spawn(2)
    X = np.empty((model.n, steps))
    Y = np.empty((model.d, steps))
    x = np.asarray(x0, dtype=float)
    for t in range(steps):
        x = forecast_step(model, x, dyn_rng)
        X[:, t] = x
        Y[:, t] = observe(model, x, obs_rng)
    return Y, X
