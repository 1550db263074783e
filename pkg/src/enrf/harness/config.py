"""Declarative twin-experiment configuration and its INI file format.

A config file has an ``[experiment]`` section, a ``[model]`` section and one
``[filter:<name>]`` section per filter.  Keys are the dataclass field names
below; anything else is rejected.  Example::

    [experiment]
    ensemble_sizes = 20, 60, 200
    n_cycles = 2000
    n_realizations = 10
    window = 1000
    seed = 1

    [model]
    system = lorenz63
    noise = t
    noise_scale2 = 1.0
    noise_dof = 3.0

    [filter:senkf]
    kind = senkf
    inflation = 1.02

    [filter:enrf-adapt]
    kind = enrf
    dof_policy = adapt
"""

import configparser
from dataclasses import asdict, dataclass, field, replace
import math
from pathlib import Path
from typing import Optional

import numpy as np

from ..dynamics import (EVERY_OTHER, IDENTITY, GaussianNoise, Lorenz63, Lorenz96,
                        StateSpaceModel, StudentTNoise)
from ..errors import ArgumentError, ConfigError
from ..estimation import DEFAULT_DOF_GRID
from ..filters import (AdaptDof, ConstDof, EnRF, FreeRunDof, RefreshDof, SEnKF,
                       SEnKFGlasso, RingGeometry)

__all__ = ["ModelConfig", "ExperimentConfig", "load_config", "parse_config",
           "filter_from_section", "DEFAULT_INFLATION_GRID", "DEFAULT_RADIUS_GRID"]

DEFAULT_INFLATION_GRID = tuple(float(a) for a in np.round(np.linspace(0.95, 1.10, 16), 12))
DEFAULT_RADIUS_GRID = (1.0, 2.0, 3.0, 4.0, 5.0, math.inf)


@dataclass(frozen=True)
class ModelConfig:
    """State-space model description.

    ``noise`` is ``t`` (St(0, noise_scale2 I, noise_dof)), ``gaussian``
    (N(0, noise_var I)) or ``none``.  ``dt_obs`` and ``obs_operator`` default
    to 0.1 / identity for Lorenz-63 and 0.4 / every_other for Lorenz-96.
    """

    system: str = "lorenz63"
    noise: str = "t"
    noise_scale2: float = 1.0
    noise_dof: float = 3.0
    noise_var: float = 4.0
    process_noise_var: float = 1e-4
    dt_obs: Optional[float] = None
    obs_operator: Optional[str] = None
    n: int = 20
    F: float = 8.0
    atol: float = 1e-8
    rtol: float = 1e-8

    def __post_init__(self):
        if self.system not in ("lorenz63", "lorenz96"):
            raise ConfigError(f"unknown system {self.system!r}")
        if self.noise not in ("t", "gaussian", "none"):
            raise ConfigError(f"unknown noise {self.noise!r}")
        if self.obs_operator not in (None, IDENTITY, EVERY_OTHER):
            raise ConfigError(f"unknown obs_operator {self.obs_operator!r}")

    def obs_noise(self):
        if self.noise == "t":
            return StudentTNoise(self.noise_scale2, self.noise_dof)
        if self.noise == "gaussian":
            return GaussianNoise(self.noise_var)
        return None

    def build(self):
        try:
            if self.system == "lorenz63":
                rhs = Lorenz63()
                dt, op = 0.1, IDENTITY
            else:
                rhs = Lorenz96(self.F, self.n)
                dt, op = 0.4, EVERY_OTHER
            return StateSpaceModel(rhs, self.dt_obs or dt, self.process_noise_var,
                                   self.obs_operator or op, self.obs_noise(),
                                   (self.atol, self.rtol))
        except ArgumentError as exc:
            raise ConfigError(str(exc)) from exc

    def geometry(self):
        """Ring geometry for localization (Lorenz-96 only)."""
        return RingGeometry(self.n) if self.system == "lorenz96" else None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    filters: tuple = ()
    ensemble_sizes: tuple = (20,)
    n_cycles: int = 2000
    n_realizations: int = 10
    seed: int = 0
    window: int = 1000
    out_dir: str = "out"
    burn_in: int = 0
    inflation_grid: tuple = DEFAULT_INFLATION_GRID
    radius_grid: tuple = DEFAULT_RADIUS_GRID
    divergence_threshold: float = 1e3
    tuning_realizations: Optional[int] = None

    def __post_init__(self):
        if not self.n_cycles > self.window >= 1:
            raise ConfigError(
                f"need n_cycles > window >= 1 (n_cycles={self.n_cycles}, window={self.window})")
        if self.n_realizations < 1:
            raise ConfigError("n_realizations must be >= 1")
        if any(M < 2 for M in self.ensemble_sizes):
            raise ConfigError("ensemble sizes must be >= 2")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        names = [f.name for f in self.filters]
        if len(set(names)) != len(names):
            raise ConfigError(f"filter names must be unique, got {names}")
        if len(self.inflation_grid) == 0:
            raise ConfigError("inflation grid is empty")

    def filter(self, name):
        for spec in self.filters:
            if spec.name == name:
                return spec
        raise ConfigError(f"no filter named {name!r}")

    def echo(self):
        """JSON-friendly dump of the configuration."""
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v
        out = asdict(replace(self, filters=()))
        out["filters"] = [dict(kind=type(f).__name__, **asdict(f)) for f in self.filters]
        return clean(out)


# ---------------------------------------------------------------------------
# INI parsing

def _float(text):
    text = text.strip().lower()
    if text in ("inf", "infinity", "none"):
        return math.inf
    return float(text)


def _floats(text):
    return tuple(_float(t) for t in text.split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if text.strip().lower() in ("", "auto", "default") else float(text)


_EXPERIMENT_KEYS = {
    "ensemble_sizes": _ints, "n_cycles": int, "n_realizations": int, "seed": int,
    "window": int, "out_dir": str, "burn_in": int, "inflation_grid": _floats,
    "radius_grid": _floats, "divergence_threshold": float,
    "tuning_realizations": int,
}

_MODEL_KEYS = {
    "system": str, "noise": str, "noise_scale2": float, "noise_dof": float,
    "noise_var": float, "process_noise_var": float, "dt_obs": float,
    "obs_operator": str, "n": int, "F": float, "atol": float, "rtol": float,
}

_FILTER_KEYS = {
    "senkf": {"inflation": float, "radius": _float},
    "senkf-glasso": {"inflation": float, "rho": _optional_float, "rho_c": float},
    "enrf": {"rho": _optional_float, "rho_c": float, "hybrid": _bool,
             "max_em_iters": int, "em_tol": float, "dof_policy": str, "nu": _float,
             "interval": _float, "capacity": int, "free_run_steps": int,
             "grid": _floats},
}


def _read(section, schema, where):
    out = {}
    for key, raw in section.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        try:
            out[key] = schema[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in [{where}]: {exc}") from None
    return out


def filter_from_section(name, values):
    """Build a filter spec from already-parsed key/value pairs."""
    values = dict(values)
    kind = values.pop("kind", None)
    if kind not in _FILTER_KEYS:
        raise ConfigError(f"[filter:{name}] needs kind = senkf | senkf-glasso | enrf")
    unknown = set(values) - set(_FILTER_KEYS[kind])
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in [filter:{name}]")
    try:
        if kind == "senkf":
            return SEnKF(name=name, **values)
        if kind == "senkf-glasso":
            return SEnKFGlasso(name=name, **values)
        policy_name = values.pop("dof_policy", "adapt")
        nu = values.pop("nu", None)
        grid = values.pop("grid", DEFAULT_DOF_GRID)
        interval = values.pop("interval", None)
        capacity = values.pop("capacity", None)
        steps = values.pop("free_run_steps", None)
        if policy_name == "const":
            if nu is None:
                raise ConfigError(f"[filter:{name}] const dof policy needs nu")
            policy = ConstDof(nu)
        elif policy_name == "free-run":
            policy = FreeRunDof(steps or 500, grid)
        elif policy_name == "refresh":
            policy = RefreshDof(interval if interval is not None else 20,
                                capacity or 500, steps or 500, grid)
        elif policy_name == "adapt":
            policy = AdaptDof(grid)
        else:
            raise ConfigError(f"unknown dof_policy {policy_name!r} in [filter:{name}]")
        return EnRF(dof_policy=policy, name=name, **values)
    except ArgumentError as exc:
        raise ConfigError(f"[filter:{name}]: {exc}") from exc


def parse_config(text):
    """Parse INI text into an `ExperimentConfig`."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    exp, model, filters = {}, {}, []
    for section in parser.sections():
        body = dict(parser[section])
        if section == "experiment":
            exp = _read(body, _EXPERIMENT_KEYS, section)
        elif section == "model":
            model = _read(body, _MODEL_KEYS, section)
        elif section.startswith("filter:"):
            name = section.split(":", 1)[1].strip()
            kind = body.pop("kind", None)
            schema = _FILTER_KEYS.get(kind)
            if schema is None:
                raise ConfigError(f"[{section}] needs kind = senkf | senkf-glasso | enrf")
            filters.append(filter_from_section(name, {"kind": kind, **_read(body, schema, section)}))
        else:
            raise ConfigError(f"unknown section [{section}]")
    return ExperimentConfig(model=ModelConfig(**model), filters=tuple(filters), **exp)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
