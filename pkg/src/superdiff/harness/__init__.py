"""Configuration, experiment runners, metrics and output emission."""

from .config import ConfigError, RunConfig, build_models, load_config, parse_config
from .experiments import Outcome, run_experiment
from .metrics import MetricsReport, metric_density_gap, metric_estimator_error, metric_mixture_weights
from .output import emit_csv, emit_samples_csv, emit_scatter_svg, read_csv

__all__ = [
    "ConfigError", "RunConfig", "build_models", "load_config", "parse_config",
    "Outcome", "run_experiment",
    "MetricsReport", "metric_density_gap", "metric_estimator_error", "metric_mixture_weights",
    "emit_csv", "emit_samples_csv", "emit_scatter_svg", "read_csv",
]
