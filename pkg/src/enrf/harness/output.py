"""Files written by the harness: metrics.csv, summary.json and optional plots.

Output is byte-for-byte deterministic for a given set of results: rows are
sorted, floats use ``repr`` and JSON keys are sorted.  NaN becomes an empty
CSV cell and ``null`` in JSON.
"""

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .studies import aggregate

__all__ = ["METRICS_COLUMNS", "write_metrics_csv", "summary_dict", "write_json",
           "emit_outputs", "jsonable"]

METRICS_COLUMNS = ("filter", "M", "realization", "cycle", "rmse", "spread", "dof_hat",
                   "diverged")


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _sorted_series(series):
    return sorted(series, key=lambda s: (s.filter, s.M, s.realization))


def write_metrics_csv(series, path):
    """One row per (filter, M, realization, cycle); cycles count from 1."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for s in _sorted_series(series):
        for t in range(len(s.rmse)):
            w.writerow([_cell(s.filter), s.M, s.realization, t + 1, _cell(s.rmse[t]),
                        _cell(s.spread[t]), _cell(s.dof[t]), _cell(s.diverged)])
    Path(path).write_text(buf.getvalue())


def summary_dict(series, config_echo, seed):
    """Summary keyed by ``"filter/M"`` with the aggregated statistics."""
    out = {}
    for row in aggregate(series):
        out[f"{row.filter}/{row.M}"] = {
            "rmse_mean": row.rmse_mean,
            "spread_median": row.spread_median,
            "dof_median": row.dof_median,
            "n_diverged": row.n_diverged,
            "config_echo": config_echo,
            "seed": seed,
        }
    return out


def write_json(obj, path):
    text = json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def _plot_series(series, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "enrf"

    rows = [r for r in aggregate(series) if not math.isnan(r.rmse_mean)]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in sorted({r.filter for r in rows}):
        sub = [r for r in rows if r.filter == name]
        Ms = [r.M for r in sub]
        ax[0].plot(Ms, [r.rmse_mean for r in sub], "o-", label=name)
        ax[1].plot(Ms, [r.spread_median for r in sub], "o-", label=name)
    for a, label in zip(ax, ("RMSE", "spread")):
        a.set_xlabel("M")
        a.set_ylabel(label)
        a.set_xscale("log")
    ax[0].legend(fontsize="small")
    fig.tight_layout()
    # fixed metadata keeps the SVG reproducible
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_outputs(series, out_dir, config, seed, plots=False, extra=None):
    """Write metrics.csv, summary.json and, optionally, plots.svg to `out_dir`.

    `extra` maps file names to JSON-serialisable payloads written alongside
    (tuning tables, dof traces).  Returns the output directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = config.echo() if config is not None else None
    write_metrics_csv(series, out / "metrics.csv")
    write_json(summary_dict(series, echo, seed), out / "summary.json")
    for name, payload in sorted((extra or {}).items()):
        write_json(payload, out / name)
    if plots and series:
        _plot_series(series, out / "plots.svg")
    return out
