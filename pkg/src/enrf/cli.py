"""Command-line entry point: ``enrf <command> [options]``.

Commands
--------
run          every configured filter at every ensemble size, as configured
sweep        same, but sEnKF-type filters get their inflation tuned per M first
tune         tune the inflation (and radius) of one filter per ensemble size
dof-trace    per-cycle dof estimates of an adaptive robust filter
convergence  static-problem comparison of the EnKF and EnRF analysis maps
"""

import argparse
from dataclasses import replace
from pathlib import Path
import sys

import numpy as np

from .errors import ConfigError, TuningError
from .filters import AdaptDof, EnRF
from .harness.config import load_config
from .harness.output import emit_outputs, write_json
from .harness.studies import (convergence_study, run_grid, sweep_ensemble_sizes,
                              trace_dof, tune_inflation)


def _ints(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _u64(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _add_common(p, suppress=False):
    # on subcommands the defaults are suppressed so options given before the
    # subcommand name are not overwritten
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=_u64, default=d(None), help="override the configured seed")
    p.add_argument("--threads", type=int, default=d(1),
                   help="worker processes for independent runs (default 1)")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--plots", action="store_true", default=d(False),
                   help="also write plots.svg")


def build_parser():
    parser = argparse.ArgumentParser(prog="enrf",
                                     description="Ensemble robust filter experiments.")
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "dof-trace", "tune", "convergence"):
        p = sub.add_parser(name)
        _add_common(p, suppress=True)
        if name != "convergence":
            p.add_argument("--config", required=True)
    p = sub.choices["tune"]
    p.add_argument("--filter", required=True, help="name of the filter section to tune")
    p = sub.choices["convergence"]
    p.add_argument("--m-grid", type=_ints, default=(100, 200, 400, 600))
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--nu", type=float, default=2.5)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--d", type=int, default=5)
    return parser


def _load(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out = args.out or config.out_dir
    return config, out


def _tuning_payload(tuning):
    out = {}
    for key, res in tuning.items():
        if isinstance(res, TuningError):
            out[key] = {"error": str(res), "table": res.table}
        else:
            out[key] = {"alpha": res.alpha, "radius": res.radius, "rmse": res.rmse,
                        "spread": res.spread, "table": res.table}
    return out


def cmd_run(args):
    config, out = _load(args)
    cells = [(spec, M, r) for spec in config.filters for M in sorted(config.ensemble_sizes)
             for r in range(config.n_realizations)]
    series = run_grid(config, cells, args.threads)
    emit_outputs(series, out, config, config.seed, args.plots)
    return out


def cmd_sweep(args):
    config, out = _load(args)
    _, series, tuning = sweep_ensemble_sizes(config, args.threads, tune=True)
    emit_outputs(series, out, config, config.seed, args.plots,
                 {"tuning.json": _tuning_payload(tuning)} if tuning else None)
    return out


def cmd_tune(args):
    config, out = _load(args)
    spec = config.filter(args.filter)
    if isinstance(spec, EnRF):
        raise ConfigError(f"filter {args.filter!r} is a robust filter and is never inflated")
    tuning = {}
    for M in sorted(config.ensemble_sizes):
        try:
            tuning[f"{spec.name}/{M}"] = tune_inflation(config, spec, M, args.threads)
        except TuningError as exc:
            tuning[f"{spec.name}/{M}"] = exc
    emit_outputs([], out, config, config.seed, extra={"tuning.json": _tuning_payload(tuning)})
    return out


def cmd_dof_trace(args):
    config, out = _load(args)
    specs = [s for s in config.filters
             if isinstance(s, EnRF) and isinstance(s.dof_policy, AdaptDof)]
    if not specs:
        specs = [EnRF(AdaptDof(), name="enrf-adapt")]
    series, payload = [], {}
    for spec in specs:
        for M in sorted(config.ensemble_sizes):
            tr = trace_dof(config, M, spec, args.threads)
            series.extend(tr.series)
            payload[f"{spec.name}/{M}"] = {
                "median": tr.median, "q05": tr.q05, "q95": tr.q95,
                "per_cycle_median": tr.per_cycle[0], "per_cycle_q05": tr.per_cycle[1],
                "per_cycle_q95": tr.per_cycle[2],
            }
    emit_outputs(series, out, config, config.seed, args.plots, {"dof_trace.json": payload})
    return out


def cmd_convergence(args):
    seed = args.seed if args.seed is not None else 0
    out = args.out or "out"
    res = convergence_study(args.n, args.d, args.nu, args.m_grid, args.replicates,
                            seed, args.threads)
    Path(out).mkdir(parents=True, exist_ok=True)
    payload = {"m_grid": list(res.m_grid), "nu": res.nu, "seed": seed,
               "replicates": args.replicates, "curves": res.curves(),
               "dof_hat_median": np.median(res.dof_hat, axis=1)}
    write_json(payload, Path(out) / "convergence.json")
    return out


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "tune": cmd_tune,
            "dof-trace": cmd_dof_trace, "convergence": cmd_convergence}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("enrf: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        out = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"enrf: config error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
