"""Twin-experiment harness: configuration, runs, studies and output files."""

from .config import ExperimentConfig, ModelConfig, load_config, parse_config
from .experiment import MetricsSeries, generate_truth, run_twin_experiment
from .output import emit_outputs
from .studies import (convergence_study, sweep_ensemble_sizes, trace_dof,
                      tune_inflation)

__all__ = ["ExperimentConfig", "ModelConfig", "load_config", "parse_config",
           "MetricsSeries", "generate_truth", "run_twin_experiment", "emit_outputs",
           "convergence_study", "sweep_ensemble_sizes", "trace_dof", "tune_inflation"]
