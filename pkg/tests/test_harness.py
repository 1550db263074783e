import csv
from dataclasses import dataclass
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enrf.cli import main
from enrf.dynamics import GaussianNoise, IDENTITY, StateSpaceModel
from enrf.errors import ArgumentError, ConfigError, TuningError
from enrf.filters import (AdaptDof, ConstDof, EnRF, EnsembleState, RefreshDof, SEnKF,
                          SEnKFGlasso, apply_inflation, senkf_analysis)
from enrf.harness import (ExperimentConfig, MetricsSeries, ModelConfig, emit_outputs,
                          parse_config, run_twin_experiment, sweep_ensemble_sizes,
                          trace_dof, tune_inflation)
from enrf.harness.experiment import compute_metrics, generate_truth
from enrf.harness.output import METRICS_COLUMNS
from enrf.harness.studies import aggregate, convergence_study, dof_quantiles, run_grid

CONFIG_TEXT = """
[experiment]
ensemble_sizes = 10, 5
n_cycles = 12
n_realizations = 2
window = 5
seed = 3

[model]
system = lorenz63
noise = t

[filter:senkf]
kind = senkf
inflation = 1.02

[filter:enrf-const]
kind = enrf
dof_policy = const
nu = 5
"""


class Decay:
    dim = 3

    def __call__(self, t, x):
        return -0.5 * x


@dataclass(frozen=True)
class LinearToy(ModelConfig):
    """Linear Gaussian state space: damped state, process and observation noise."""

    def build(self):
        return StateSpaceModel(Decay(), 0.1, 0.1, IDENTITY, GaussianNoise(1.0), (1e-8, 1e-8))


def small_config(**kw):
    base = dict(n_cycles=20, window=10, n_realizations=1, ensemble_sizes=(10,))
    return ExperimentConfig(**{**base, **kw})


def series_equal(a, b):
    return (a.diverged == b.diverged and np.array_equal(a.rmse, b.rmse, equal_nan=True)
            and np.array_equal(a.spread, b.spread, equal_nan=True)
            and np.array_equal(a.dof, b.dof, equal_nan=True))


class TestComputeMetrics:
    def test_identical_particles(self):
        x = np.array([1.0, -2.0, 3.0])
        assert compute_metrics(np.repeat(x[:, None], 5, axis=1), x) == (0.0, 0.0)

    def test_two_particles(self):
        rmse, spread = compute_metrics([[0.0, 2.0]], [1.0])
        assert rmse == 0.0
        assert spread == pytest.approx(math.sqrt(2))

    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(-100, 100))
    def test_translation_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        X, x = rng.standard_normal((4, 6)), rng.standard_normal(4)
        a = compute_metrics(X, x)
        b = compute_metrics(X + shift, x + shift)
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)

    def test_errors(self):
        with pytest.raises(ArgumentError):
            compute_metrics(np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ArgumentError):
            compute_metrics(np.zeros((2, 3)), np.zeros(3))


class TestConfig:
    def test_parse(self):
        cfg = parse_config(CONFIG_TEXT)
        assert cfg.ensemble_sizes == (10, 5) and cfg.seed == 3
        assert cfg.filter("senkf") == SEnKF(inflation=1.02, name="senkf")
        assert cfg.filter("enrf-const").dof_policy == ConstDof(5.0)

    @pytest.mark.parametrize("kw", [dict(window=0), dict(n_cycles=10, window=10),
                                    dict(n_realizations=0), dict(ensemble_sizes=(1,)),
                                    dict(seed=-1), dict(inflation_grid=())])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw)

    @pytest.mark.parametrize("text", [
        "[experiment]\nwindows = 3\n",
        "[model]\nsystem = lorenz99\n",
        "[filter:a]\nkind = senkf\nrho = 0.1\n",
        "[filter:a]\nkind = kalman\n",
        "[filter:a]\nkind = enrf\ndof_policy = const\n",
        "[filter:a]\nkind = senkf\ninflation = 2.0\n",
        "[other]\nx = 1\n",
        "[experiment]\nn_cycles = many\n",
    ])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_policies(self):
        cfg = parse_config("[filter:r]\nkind = enrf\ndof_policy = refresh\ninterval = inf\n"
                           "capacity = 40\n[filter:a]\nkind = enrf\ngrid = 3, 10, inf\n")
        assert cfg.filter("r").dof_policy.interval == math.inf
        assert cfg.filter("r").dof_policy.capacity == 40
        assert cfg.filter("a").dof_policy == AdaptDof((3.0, 10.0, math.inf))

    def test_echo_is_json(self):
        json.dumps(parse_config(CONFIG_TEXT).echo(), allow_nan=False)


class TestTwinExperiment:
    def test_deterministic(self):
        cfg = small_config()
        a = run_twin_experiment(cfg, SEnKF(), 10, 0)
        b = run_twin_experiment(cfg, SEnKF(), 10, 0)
        assert series_equal(a, b)

    def test_realizations_differ(self):
        cfg = small_config()
        a = run_twin_experiment(cfg, SEnKF(), 10, 0)
        b = run_twin_experiment(cfg, SEnKF(), 10, 1)
        assert not np.array_equal(a.rmse, b.rmse)

    def test_shared_truth(self):
        cfg = small_config()
        model = cfg.model.build()
        truth = generate_truth(model, cfg.n_cycles, cfg.seed, 0)
        assert series_equal(run_twin_experiment(cfg, SEnKF(), 10, 0),
                            run_twin_experiment(cfg, SEnKF(), 10, 0, truth, model))

    def test_perfect_observation(self):
        cfg = small_config(model=ModelConfig(noise="gaussian", noise_var=1e-4),
                           n_cycles=200, window=100)
        s = run_twin_experiment(cfg, SEnKF(), 100, 0)
        scale = generate_truth(cfg.model.build(), 200, cfg.seed, 0).states.std()
        assert not s.diverged
        assert s.rmse_mean < scale / 10

    def test_divergence_is_recorded(self):
        cfg = small_config(divergence_threshold=1e-9)
        s = run_twin_experiment(cfg, SEnKF(), 10, 0)
        assert s.diverged and s.diverged_at == 1
        assert np.all(np.isnan(s.rmse[1:]))
        assert math.isnan(s.rmse_mean)

    def test_robust_filters_run(self):
        cfg = small_config()
        for spec in (EnRF(AdaptDof((3, 10, 100))), EnRF(RefreshDof(5, 20, 30))):
            s = run_twin_experiment(cfg, spec, 10, 0)
            assert not s.diverged
            assert not np.any(np.isnan(s.dof))

    def test_window_contract(self):
        # summaries only see the trailing window
        rng = np.random.default_rng(0)
        tail = rng.random(10)
        a = MetricsSeries("f", 5, 0, np.r_[rng.random(10), tail], np.r_[rng.random(10), tail],
                          np.full(20, np.nan), 10)
        b = MetricsSeries("f", 5, 0, np.r_[100 * rng.random(10), tail],
                          np.r_[rng.random(10), tail], np.full(20, np.nan), 10)
        assert a.rmse_mean == b.rmse_mean == pytest.approx(tail.mean())
        assert a.spread_median == b.spread_median == pytest.approx(np.median(tail))
        assert math.isnan(a.dof_median)


def deflated_runner(config, spec, M, realization):
    """Static linear-Gaussian analysis whose optimal inflation is exactly 1.05.

    Truth errors have variance 1.05 but the ensemble carries variance 1 in
    every component.  All second moments are made exact by building the
    vectors from orthonormal columns, so the RMSE is a deterministic
    function of the inflation with its minimum at 1.05.
    """
    n, true_var = 30, 1.05
    rng = np.random.default_rng(realization)
    M = 2 * n + 1
    Q, _ = np.linalg.qr(np.column_stack([np.ones(M), rng.standard_normal((M, 2 * n))]))
    A = math.sqrt(M - 1) * Q[:, 1:n + 1].T
    B = math.sqrt(M - 1) * Q[:, n + 1:].T
    q, _ = np.linalg.qr(rng.standard_normal((n, 2)))
    truth = math.sqrt(true_var * n) * q[:, 0]
    y_star = truth + math.sqrt(n) * q[:, 1]
    state = apply_inflation(EnsembleState(A), spec.inflation)
    out = senkf_analysis(state, state.particles + B, y_star)
    rmse, spread = compute_metrics(out.particles, truth)
    N = config.n_cycles
    return MetricsSeries(spec.name, M, realization, np.full(N, rmse), np.full(N, spread),
                         np.full(N, np.nan), config.window)


class TestTuneInflation:
    def test_single_point(self):
        cfg = small_config(inflation_grid=(1.03,))
        res = tune_inflation(cfg, SEnKF(), 10)
        assert res.alpha == 1.03 and len(res.table) == 1

    def test_deterministic(self):
        cfg = small_config(inflation_grid=(1.0, 1.05, 1.1))
        a, b = tune_inflation(cfg, SEnKF(), 10), tune_inflation(cfg, SEnKF(), 10)
        assert a.alpha == b.alpha and a.table == b.table

    def test_deflated_scenario(self):
        cfg = small_config(n_cycles=2, window=1, n_realizations=3)
        res = tune_inflation(cfg, SEnKF(), 0, runner=deflated_runner)
        assert abs(res.alpha - 1.05) <= 0.01 + 1e-12
        rmse = [row["rmse_mean"] for row in res.table]
        assert res.rmse == min(rmse)

    def test_ties_go_to_smaller_alpha(self):
        cfg = small_config(n_cycles=2, window=1, inflation_grid=(1.02, 1.0, 1.01))
        flat = lambda c, s, M, r: MetricsSeries(s.name, M, r, np.ones(2), np.ones(2),
                                                np.full(2, np.nan), 1)
        assert tune_inflation(cfg, SEnKF(), 5, runner=flat).alpha == 1.0

    def test_all_diverged(self):
        cfg = small_config(divergence_threshold=1e-9, inflation_grid=(1.0, 1.05))
        with pytest.raises(TuningError) as info:
            tune_inflation(cfg, SEnKF(), 10)
        assert len(info.value.table) == 2

    def test_robust_filter_rejected(self):
        with pytest.raises(TuningError):
            tune_inflation(small_config(), EnRF(), 10)

    def test_localized_grid(self):
        cfg = small_config(model=ModelConfig(system="lorenz96", noise="t"), n_cycles=6,
                           window=3, inflation_grid=(1.0, 1.05), radius_grid=(2.0, math.inf))
        res = tune_inflation(cfg, SEnKF(), 10)
        assert len(res.table) == 4
        assert res.radius in (2.0, math.inf)


class TestSweep:
    def test_single_cell_matches_run(self):
        cfg = small_config(filters=(SEnKF(),))
        rows, series, tuning = sweep_ensemble_sizes(cfg)
        direct = run_twin_experiment(cfg, SEnKF(), 10, 0)
        assert len(rows) == 1 and not tuning
        assert rows[0].rmse_mean == direct.rmse_mean
        assert rows[0].spread_median == direct.spread_median

    def test_rows_sorted(self):
        cfg = small_config(filters=(SEnKF(name="zeta"), SEnKFGlasso(name="alpha")),
                           ensemble_sizes=(12, 6), n_cycles=6, window=3)
        rows, _, _ = sweep_ensemble_sizes(cfg)
        assert [(r.filter, r.M) for r in rows] == [("alpha", 6), ("alpha", 12),
                                                    ("zeta", 6), ("zeta", 12)]

    def test_tuned_sweep(self):
        cfg = small_config(filters=(SEnKF(), EnRF(ConstDof(10.0))), n_cycles=6, window=3,
                           inflation_grid=(1.0, 1.05))
        rows, _, tuning = sweep_ensemble_sizes(cfg, tune=True)
        assert set(tuning) == {"senkf/10"}
        assert len(rows) == 2

    def test_aggregate_counts_divergence(self):
        ok = MetricsSeries("f", 5, 0, np.ones(4), np.ones(4), np.full(4, 7.0), 2)
        bad = MetricsSeries("f", 5, 1, np.full(4, np.nan), np.full(4, np.nan),
                            np.full(4, np.nan), 2, diverged=True)
        (row,) = aggregate([ok, bad])
        assert row.n_diverged == 1 and row.n_realizations == 2
        assert row.rmse_mean == 1.0 and row.dof_median == 7.0

    def test_pool_matches_serial(self):
        cfg = small_config(n_cycles=6, window=3)
        cells = [(SEnKF(), 10, r) for r in range(2)]
        for a, b in zip(run_grid(cfg, cells, 1), run_grid(cfg, cells, 2)):
            assert series_equal(a, b)


class TestDofTrace:
    def test_gaussian_toy(self):
        cfg = ExperimentConfig(LinearToy(), n_cycles=40, window=20, n_realizations=2)
        tr = trace_dof(cfg, 500)
        assert tr.per_cycle.shape == (3, 40)
        assert tr.median >= 50

    def test_needs_adaptive_filter(self):
        with pytest.raises(TypeError):
            trace_dof(small_config(), 10, EnRF(ConstDof(5.0)))

    def test_quantiles_with_infinity(self):
        np.testing.assert_allclose(dof_quantiles([5.0, 5.0, 5.0], [0.05, 0.5, 0.95]), 5.0)
        assert dof_quantiles([3.0, math.inf, math.inf], [0.5])[0] == math.inf
        assert dof_quantiles([3.0, 4.0, math.inf], [0.5])[0] == 4.0


class TestConvergence:
    def test_gaussian_variant(self):
        # no penalty and a Gaussian joint: both maps are the same Kalman update
        res = convergence_study(m_grid=(200,), replicates=10, nu=math.inf, rho_c=0.0)
        c = res.curves()
        assert c["enrf_mean_err"][0] == pytest.approx(c["enkf_mean_err"][0], rel=0.05)

    def test_shapes(self):
        res = convergence_study(m_grid=(50, 100), replicates=3)
        assert res.enkf_mean_err.shape == (2, 3) and res.dof_hat.shape == (2, 3)
        assert all(len(v) == 2 for v in res.curves().values())


class TestOutputs:
    def test_empty(self, tmp_path):
        emit_outputs([], tmp_path, small_config(), 0)
        assert (tmp_path / "metrics.csv").read_text() == ",".join(METRICS_COLUMNS) + "\n"
        assert json.loads((tmp_path / "summary.json").read_text()) == {}

    def test_roundtrip(self, tmp_path):
        cfg = small_config(n_cycles=6, window=3)
        series = run_grid(cfg, [(SEnKF(), 10, 0), (SEnKF(), 10, 1)])
        emit_outputs(series, tmp_path, cfg, cfg.seed)
        summary = json.loads((tmp_path / "summary.json").read_text())
        (row,) = aggregate(series)
        entry = summary["senkf/10"]
        assert entry["rmse_mean"] == row.rmse_mean
        assert entry["spread_median"] == row.spread_median
        assert entry["dof_median"] is None and entry["n_diverged"] == 0
        assert entry["seed"] == cfg.seed

    def test_plots(self, tmp_path):
        cfg = small_config(n_cycles=6, window=3)
        emit_outputs(run_grid(cfg, [(EnRF(AdaptDof((3, 10))), 10, 0)]), tmp_path, cfg, 0,
                     plots=True)
        assert (tmp_path / "plots.svg").read_text().lstrip().startswith("<?xml")


class TestCLI:
    def write_config(self, tmp_path, text=CONFIG_TEXT):
        path = tmp_path / "exp.ini"
        path.write_text(text)
        return str(path)

    def test_run(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        out = tmp_path / "a"
        assert main(["run", "--config", cfg, "--out", str(out)]) == 0
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == METRICS_COLUMNS
        # filters x sizes x realizations x cycles
        assert len(rows) - 1 == 2 * 2 * 2 * 12
        keys = [(r[0], int(r[1]), int(r[2]), int(r[3])) for r in rows[1:]]
        assert keys == sorted(keys)
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"senkf/5", "senkf/10", "enrf-const/5", "enrf-const/10"}
        assert "wrote" in capsys.readouterr().out

    def test_byte_determinism(self, tmp_path):
        cfg = self.write_config(tmp_path)
        for d in ("a", "b"):
            assert main(["--seed", "11", "run", "--config", cfg, "--out",
                         str(tmp_path / d)]) == 0
        for name in ("metrics.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert json.loads((tmp_path / "a" / "summary.json").read_text())["senkf/5"]["seed"] == 11

    def test_seed_after_subcommand(self, tmp_path):
        cfg = self.write_config(tmp_path)
        assert main(["run", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "o")]) == 0
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["senkf/5"]["seed"] == 7

    def test_tune(self, tmp_path):
        text = CONFIG_TEXT.replace("window = 5", "window = 5\ninflation_grid = 1.0, 1.05")
        cfg = self.write_config(tmp_path, text)
        out = tmp_path / "t"
        assert main(["tune", "--config", cfg, "--filter", "senkf", "--out", str(out)]) == 0
        tuning = json.loads((out / "tuning.json").read_text())
        assert set(tuning) == {"senkf/5", "senkf/10"}
        assert main(["tune", "--config", cfg, "--filter", "enrf-const", "--out", str(out)]) == 2

    def test_dof_trace(self, tmp_path):
        text = CONFIG_TEXT.replace("ensemble_sizes = 10, 5", "ensemble_sizes = 10")
        cfg = self.write_config(tmp_path, text)
        out = tmp_path / "d"
        assert main(["dof-trace", "--config", cfg, "--out", str(out)]) == 0
        trace = json.loads((out / "dof_trace.json").read_text())
        assert len(trace["enrf-adapt/10"]["per_cycle_median"]) == 12

    def test_convergence(self, tmp_path):
        out = tmp_path / "c"
        assert main(["convergence", "--m-grid", "30,60", "--replicates", "2",
                     "--out", str(out)]) == 0
        payload = json.loads((out / "convergence.json").read_text())
        assert payload["m_grid"] == [30, 60]
        assert len(payload["curves"]["enrf_mean_err"]) == 2

    @pytest.mark.parametrize("text", [None, "[experiment]\nbogus = 1\n"])
    def test_config_errors(self, tmp_path, text, capsys):
        cfg = str(tmp_path / "missing.ini") if text is None else self.write_config(tmp_path, text)
        assert main(["run", "--config", cfg]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_threads(self, tmp_path):
        assert main(["--threads", "0", "run", "--config", self.write_config(tmp_path)]) == 2

    def test_bad_seed(self):
        with pytest.raises(SystemExit):
            main(["--seed", "-3", "convergence"])
