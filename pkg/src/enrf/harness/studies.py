"""Multi-run studies built on `run_twin_experiment`.

Every run owns a random stream derived from (seed, filter name, M,
realization), so results do not depend on the execution order and the
optional process pool gives the same numbers as a serial loop.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import math
from typing import NamedTuple

import numpy as np

from ..errors import TuningError
from ..estimation import GridSearch, TlassoConfig, default_rho, tlasso
from ..filters import AdaptDof, EnRF, EnsembleState, SEnKF, senkf_analysis
from ..tdist import JointSplit, TDist, condition, moments, sample
from ..transport import apply_analysis, build_analysis_map
from .experiment import generate_truth, run_twin_experiment

__all__ = ["TuningResult", "SweepRow", "DofTrace", "ConvergenceResult",
           "run_grid", "tune_inflation", "sweep_ensemble_sizes", "aggregate",
           "trace_dof", "convergence_study", "convergence_replicate"]


def _pool_map(fn, tasks, threads):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, *zip(*tasks)))


def _run_cell(config, spec, M, realization):
    return run_twin_experiment(config, spec, M, realization)


def run_grid(config, cells, threads=1):
    """Run every (spec, M, realization) triple in `cells`.

    In serial mode the truth of each realization is generated once and
    shared by all cells.
    """
    if threads > 1:
        return _pool_map(_run_cell, [(config, s, M, r) for s, M, r in cells], threads)
    model = config.model.build()
    truths = {}
    out = []
    for spec, M, r in cells:
        if r not in truths:
            truths[r] = generate_truth(model, config.n_cycles, config.seed, r, config.burn_in)
        out.append(run_twin_experiment(config, spec, M, r, truths[r], model))
    return out


class SweepRow(NamedTuple):
    filter: str
    M: int
    rmse_mean: float
    spread_median: float
    dof_median: float
    n_diverged: int
    n_realizations: int


def aggregate(series):
    """Summarise runs per (filter, M), sorted by filter name then M.

    RMSE is the mean over realizations of the window-mean RMSE; spread and
    dof are medians over realizations of the window medians.  Diverged
    realizations are counted and left out of the statistics.
    """
    groups = {}
    for s in series:
        groups.setdefault((s.filter, s.M), []).append(s)
    rows = []
    for (name, M), runs in sorted(groups.items()):
        ok = [s for s in runs if not s.diverged]
        dof = [s.dof_median for s in ok if not math.isnan(s.dof_median)]
        rows.append(SweepRow(
            name, M,
            float(np.mean([s.rmse_mean for s in ok])) if ok else math.nan,
            float(np.median([s.spread_median for s in ok])) if ok else math.nan,
            float(np.median(dof)) if dof else math.nan,
            len(runs) - len(ok), len(runs)))
    return rows


# ---------------------------------------------------------------------------
# inflation tuning

@dataclass(frozen=True)
class TuningResult:
    alpha: float
    radius: float
    rmse: float
    spread: float
    table: list = field(default_factory=list)

    def apply(self, spec):
        """`spec` with the tuned inflation (and radius, for localized filters)."""
        if isinstance(spec, SEnKF):
            return replace(spec, inflation=self.alpha, radius=self.radius)
        return replace(spec, inflation=self.alpha)


def tune_inflation(config, spec, M, threads=1, realizations=None, runner=None):
    """Pick the inflation factor (and localization radius) with the lowest RMSE.

    Every grid point is run over `realizations` realizations (default
    ``config.tuning_realizations`` or ``config.n_realizations``).  A grid
    point with any diverged realization ranks behind all fully stable ones;
    ties go to the smaller inflation, then the smaller radius.  For a
    localized sEnKF on a ring model the radius grid is searched jointly.

    `runner(config, spec, M, realization)` may replace the twin experiment,
    e.g. to tune on a synthetic scenario.

    Raises
    ------
    TuningError
        If every run diverged; the table is attached.
    """
    if isinstance(spec, EnRF):
        raise TuningError("the robust filter is never inflated")
    n_real = realizations or config.tuning_realizations or config.n_realizations
    radii = [math.inf]
    if isinstance(spec, SEnKF) and config.model.geometry() is not None:
        radii = sorted(config.radius_grid)
    candidates = []
    for alpha in sorted(config.inflation_grid):
        for radius in radii:
            cand = replace(spec, inflation=alpha)
            if isinstance(spec, SEnKF):
                cand = replace(cand, radius=radius)
            candidates.append((alpha, radius, cand))
    cells = [(cand, M, r) for _, _, cand in candidates for r in range(n_real)]
    if runner is None:
        series = run_grid(config, cells, threads)
    else:
        series = [runner(config, c, m, r) for c, m, r in cells]
    table = []
    for i, (alpha, radius, _) in enumerate(candidates):
        runs = series[i * n_real:(i + 1) * n_real]
        ok = [s for s in runs if not s.diverged]
        table.append({
            "alpha": alpha, "radius": radius,
            "rmse_mean": float(np.mean([s.rmse_mean for s in ok])) if ok else math.nan,
            "spread_median": float(np.median([s.spread_median for s in ok])) if ok else math.nan,
            "n_diverged": len(runs) - len(ok),
        })
    valid = [row for row in table if not math.isnan(row["rmse_mean"])]
    if not valid:
        raise TuningError(f"every tuning run of {spec.name} at M={M} diverged", table)
    best = min(valid, key=lambda row: (row["n_diverged"] > 0, row["rmse_mean"],
                                       row["alpha"], row["radius"]))
    return TuningResult(best["alpha"], best["radius"], best["rmse_mean"],
                        best["spread_median"], table)


def sweep_ensemble_sizes(config, threads=1, tune=False):
    """Run every configured filter at every ensemble size.

    With ``tune=True`` the inflation of each sEnKF-type filter is tuned per
    ensemble size first.  Returns ``(rows, series, tuning)`` where `rows`
    comes from `aggregate` and `tuning` maps ``"name/M"`` to a TuningResult.
    """
    cells, tuning = [], {}
    for spec in config.filters:
        for M in sorted(config.ensemble_sizes):
            s = spec
            if tune and not isinstance(spec, EnRF):
                try:
                    res = tune_inflation(config, spec, M, threads)
                    tuning[f"{spec.name}/{M}"] = res
                    s = res.apply(spec)
                except TuningError as exc:
                    tuning[f"{spec.name}/{M}"] = exc
            cells.extend((s, M, r) for r in range(config.n_realizations))
    series = run_grid(config, cells, threads)
    return aggregate(series), series, tuning


# ---------------------------------------------------------------------------
# degree-of-freedom traces

@dataclass(frozen=True, eq=False)
class DofTrace:
    """Dof estimates of an adaptive robust filter across realizations.

    ``per_cycle`` holds the median, 5% and 95% quantiles across
    realizations at every cycle (shape (3, n_cycles)); the scalar summaries
    are temporal statistics of the per-cycle median over the trailing window.
    """

    M: int
    per_cycle: np.ndarray
    median: float
    q05: float
    q95: float
    series: list


def dof_quantiles(dofs, probs, axis=None):
    """Quantiles of dof values that may include ``inf``.

    Computed on ``1/nu`` (so the Gaussian limit is 0 and interpolation is
    finite) and mapped back; NaN entries are ignored.
    """
    inv = 1.0 / np.asarray(dofs, dtype=float)
    probs = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore"):
        return 1.0 / np.nanquantile(inv, 1.0 - probs, axis=axis)


def trace_dof(config, M, spec=None, threads=1):
    """Record the grid-search dof of an adaptive robust filter at every cycle.

    ``per_cycle`` holds the median and 5/95% quantiles over realizations at
    each cycle.  The scalar summaries are the median and 5/95% quantiles over
    time (last ``config.window`` cycles) of the per-cycle median.
    """
    spec = spec or EnRF(AdaptDof(), name="enrf-adapt")
    if not isinstance(spec, EnRF) or not isinstance(spec.dof_policy, AdaptDof):
        raise TypeError("trace_dof needs an EnRF spec with an AdaptDof policy")
    cells = [(spec, M, r) for r in range(config.n_realizations)]
    series = run_grid(config, cells, threads)
    ok = [s for s in series if not s.diverged]
    if not ok:
        nan = math.nan
        return DofTrace(M, np.full((3, config.n_cycles), nan), nan, nan, nan, series)
    dofs = np.vstack([s.dof for s in ok])
    per_cycle = dof_quantiles(dofs, [0.5, 0.05, 0.95], axis=0)
    q = dof_quantiles(per_cycle[0, -config.window:], [0.5, 0.05, 0.95])
    return DofTrace(M, per_cycle, float(q[0]), float(q[1]), float(q[2]), series)


# ---------------------------------------------------------------------------
# convergence of the analysis maps on a static problem

@dataclass(frozen=True, eq=False)
class ConvergenceResult:
    """Posterior error curves of the EnKF and EnRF analysis maps.

    Each ``*_err`` array has shape (len(m_grid), replicates); errors are
    ``||mean - true||_2 / sqrt(n)`` and ``||cov - true||_F / sqrt(n)``.
    """

    m_grid: tuple
    nu: float
    enkf_mean_err: np.ndarray
    enrf_mean_err: np.ndarray
    enkf_cov_err: np.ndarray
    enrf_cov_err: np.ndarray
    dof_hat: np.ndarray

    def curves(self):
        return {name: getattr(self, name).mean(axis=1).tolist()
                for name in ("enkf_mean_err", "enrf_mean_err", "enkf_cov_err", "enrf_cov_err")}


def convergence_replicate(n, d, nu, M, seed, replicate, rho_c=0.5):
    """One replicate: prior sample, observation, both analyses and their errors."""
    # the observation depends on the replicate only, so every M sees the same one
    obs_rng = np.random.default_rng(np.random.SeedSequence([seed, replicate, 0]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, replicate, M, 1]))
    joint = JointSplit(TDist.standard(n + d, nu), d)
    y_star = sample(TDist.standard(d, nu), 1, obs_rng)[:, 0]
    Z = sample(joint.dist, M, rng)
    Y, X = Z[:d], Z[d:]
    post = condition(joint, y_star)
    mu_true, cov_true = moments(post)

    enkf = senkf_analysis(EnsembleState(X), Y, y_star).particles
    cfg = TlassoConfig(rho=default_rho(M, rho_c), dof_mode=GridSearch())
    fit = tlasso(Z, cfg)
    amap = build_analysis_map(JointSplit(TDist(fit.mean, fit.scale, fit.dof), d))
    enrf = apply_analysis(amap, y_star, Y, X)

    def errors(P):
        mean_err = np.linalg.norm(P.mean(axis=1) - mu_true) / math.sqrt(n)
        cov_err = np.linalg.norm(np.cov(P, ddof=1) - cov_true) / math.sqrt(n)
        return mean_err, cov_err

    return (*errors(enkf), *errors(enrf), fit.dof)


def convergence_study(n=10, d=5, nu=2.5, m_grid=(100, 200, 400, 600), replicates=200,
                      seed=0, threads=1, rho_c=0.5):
    """Compare EnKF and EnRF posterior errors on a standard joint t-distribution.

    The joint of ``(y, x)`` is St(0, I, nu); the exact posterior follows
    from conditioning, so both analysis maps can be scored against it.
    """
    m_grid = tuple(int(M) for M in m_grid)
    tasks = [(n, d, nu, M, seed, r, rho_c) for M in m_grid for r in range(replicates)]
    out = np.array(_pool_map(convergence_replicate, tasks, threads), dtype=float)
    out = out.reshape(len(m_grid), replicates, 5)
    return ConvergenceResult(m_grid, nu, out[..., 0], out[..., 2], out[..., 1],
                             out[..., 3], out[..., 4])
