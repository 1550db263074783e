"""Twin experiments: one truth run, one filter, one ensemble size."""

from dataclasses import dataclass, field
import math
import zlib

import numpy as np

from ..dynamics import forecast_step, observe
from ..errors import ArgumentError, ConvergenceError, SingularMatrixError, StiffnessError
from ..filters import (EnRF, EnsembleState, FreeRunDof, RefreshDof, assimilate,
                       free_run_dof, initial_buffer)

__all__ = ["MetricsSeries", "Truth", "compute_metrics", "generate_truth",
           "run_twin_experiment", "filter_rng", "truth_rng"]

TRUTH_TAG = 0x7472757468        # distinguishes the truth stream from filter streams

# failures that mark a run as diverged instead of aborting the sweep
_DIVERGENCE_ERRORS = (SingularMatrixError, ConvergenceError, StiffnessError,
                      ArgumentError, FloatingPointError)


def truth_rng(seed, realization):
    return np.random.default_rng(np.random.SeedSequence([seed, TRUTH_TAG, realization]))


def filter_rng(seed, filter_name, M, realization):
    tag = zlib.crc32(filter_name.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, tag, M, realization]))


def compute_metrics(particles, truth):
    """RMSE of the ensemble mean and spread ``sqrt(tr(cov) / n)``.

    The covariance uses the ``1 / (M - 1)`` normalisation.
    """
    X = np.asarray(particles, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if X.ndim != 2 or X.shape[0] != truth.shape[0]:
        raise ArgumentError("ensemble and truth dimensions differ")
    n, M = X.shape
    if M < 2:
        raise ArgumentError("spread needs at least two particles")
    mean = X.mean(axis=1)
    rmse = np.linalg.norm(mean - truth) / math.sqrt(n)
    spread = math.sqrt(np.sum((X - mean[:, None]) ** 2) / (M - 1) / n)
    return float(rmse), float(spread)


@dataclass(frozen=True, eq=False)
class Truth:
    """True states ``states[:, t]`` and observations ``obs[:, t]`` for cycles 1..N."""
    states: np.ndarray
    obs: np.ndarray

    @property
    def n_cycles(self):
        return self.states.shape[1]


def generate_truth(model, n_cycles, seed, realization, burn_in=0):
    """Simulate the true trajectory from ``x0 ~ N(0, I)`` and observe it each cycle."""
    rng = truth_rng(seed, realization)
    dyn_rng, obs_rng = rng.spawn(2)
    x = dyn_rng.standard_normal(model.n)
    for _ in range(burn_in):
        x = forecast_step(model, x, dyn_rng)
    states = np.empty((model.n, n_cycles))
    obs = np.empty((model.d, n_cycles))
    for t in range(n_cycles):
        x = forecast_step(model, x, dyn_rng)
        states[:, t] = x
        obs[:, t] = observe(model, x, obs_rng)
    return Truth(states, obs)


@dataclass(eq=False)
class MetricsSeries:
    """Per-cycle metrics of one filter run plus trailing-window summaries.

    After a divergence the remaining cycles hold ``nan``.
    """

    filter: str
    M: int
    realization: int
    rmse: np.ndarray
    spread: np.ndarray
    dof: np.ndarray
    window: int
    diverged: bool = False
    diverged_at: int = -1
    extra: dict = field(default_factory=dict)

    def _window(self, a):
        return a[-self.window:]

    @property
    def rmse_mean(self):
        return float(np.mean(self._window(self.rmse))) if not self.diverged else math.nan

    @property
    def spread_median(self):
        return float(np.median(self._window(self.spread))) if not self.diverged else math.nan

    @property
    def dof_median(self):
        w = self._window(self.dof)
        if self.diverged or np.all(np.isnan(w)):
            return math.nan
        return float(np.median(w))


def _initial_buffer(config, spec, model, M, rng):
    """Dof buffer for policies that start from a free-run estimate."""
    policy = spec.dof_policy
    if not isinstance(policy, (FreeRunDof, RefreshDof)):
        return None
    steps = policy.steps if isinstance(policy, FreeRunDof) else policy.free_run_steps
    nu = free_run_dof(model, steps, rng, spec, policy.grid)
    capacity = policy.capacity if isinstance(policy, RefreshDof) else 2
    return initial_buffer(model.n + model.d, capacity, nu)


def run_twin_experiment(config, spec, M, realization, truth=None, model=None):
    """Assimilate the truth's observations with `spec` and record the metrics.

    The filter sees only the observations; the true states are used solely
    to score each analysis.  The initial ensemble is drawn from N(0, I).
    """
    model = model or config.model.build()
    if truth is None:
        truth = generate_truth(model, config.n_cycles, config.seed, realization,
                               config.burn_in)
    N = truth.n_cycles
    rng = filter_rng(config.seed, spec.name, M, realization)
    init_rng, setup_rng, run_rng = rng.spawn(3)
    rmse = np.full(N, np.nan)
    spread = np.full(N, np.nan)
    dof = np.full(N, np.nan)
    series = MetricsSeries(spec.name, M, realization, rmse, spread, dof, config.window)
    geometry = config.model.geometry()
    X = init_rng.standard_normal((model.n, M))
    t = -1
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            buffer = _initial_buffer(config, spec, model, M, setup_rng) \
                if isinstance(spec, EnRF) else None
            for t in range(N):
                X = forecast_step(model, X, run_rng)
                state = EnsembleState(X, t + 1)
                out = assimilate(state, truth.obs[:, t], model, spec, run_rng, buffer, geometry)
                X, buffer = out.state.particles, out.buffer
                rmse[t], spread[t] = compute_metrics(X, truth.states[:, t])
                dof[t] = out.dof
                if not rmse[t] <= config.divergence_threshold:
                    raise FloatingPointError(f"RMSE {rmse[t]:.3g} above threshold")
        except _DIVERGENCE_ERRORS as exc:
            series.diverged = True
            series.diverged_at = t + 1      # 0 means the setup failed
            series.extra["error"] = f"{type(exc).__name__}: {exc}"
    return series
