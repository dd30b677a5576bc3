"""Metrics, reference forecasters and the experiment harness."""

from .baselines import DEFAULT_K, ConstantForecaster, KNNForecaster, baseline_constant, baseline_knn
from .experiment import ExperimentSpec, MethodSpec, SpecError, run_experiment
from .metrics import (METRICS, EventError, crps_empirical, crps_trajectories, mae, mean_ci95, mse,
                      per_variable, rmse, score, time_to_event_error)

__all__ = [
    "ConstantForecaster", "DEFAULT_K", "EventError", "ExperimentSpec", "KNNForecaster", "METRICS",
    "MethodSpec", "SpecError", "baseline_constant", "baseline_knn", "crps_empirical",
    "crps_trajectories", "mae", "mean_ci95", "mse", "per_variable", "rmse", "run_experiment",
    "score", "time_to_event_error",
]
