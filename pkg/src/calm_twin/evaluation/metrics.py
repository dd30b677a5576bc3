"""Point and probabilistic forecast metrics over trajectories."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from ..core import TimeStep, Trajectory
from ..datagen import DEATH_DIAMETER_CM, VOLUME, sphere_volume


def _steps(x) -> Sequence[TimeStep]:
    return x.steps if isinstance(x, Trajectory) else list(x)


def state_matrix(x, names: Sequence[str]) -> np.ndarray:
    """``(steps, variables)`` array of the named state values."""
    steps = _steps(x)
    try:
        return np.array([[s.state[n] for n in names] for s in steps], dtype=float).reshape(
            len(steps), len(names))
    except KeyError as exc:
        raise ValueError(f"missing state variable {exc}") from None


def _aligned(pred, truth, variables=None):
    truth_steps = _steps(truth)
    if variables is None:
        variables = list(truth_steps[0].state) if truth_steps else []
    p, t = state_matrix(pred, variables), state_matrix(truth, variables)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth shape {t.shape}")
    if p.size == 0:
        raise ValueError("nothing to score")
    return p, t, list(variables)


def per_variable(pred, truth, variables=None) -> dict[str, dict[str, float]]:
    p, t, names = _aligned(pred, truth, variables)
    err = p - t
    out = {}
    for j, n in enumerate(names):
        m = float(np.mean(err[:, j] ** 2))
        out[n] = {"mse": m, "mae": float(np.mean(np.abs(err[:, j]))), "rmse": float(np.sqrt(m))}
    return out


def mse(pred, truth, variables=None) -> float:
    """Squared error averaged over every state variable and step."""
    p, t, _ = _aligned(pred, truth, variables)
    return float(np.mean((p - t) ** 2))


def mae(pred, truth, variables=None) -> float:
    p, t, _ = _aligned(pred, truth, variables)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth, variables=None) -> float:
    return float(np.sqrt(mse(pred, truth, variables)))


def crps_empirical(ensemble, obs):
    """Empirical CRPS of an ensemble against an observation.

    ``mean|x_i - y| - mean|x_i - x_j| / 2``. The ensemble axis is the first
    one; remaining axes broadcast against ``obs``.
    """
    x = np.asarray(ensemble, dtype=float)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ValueError("ensemble must be non-empty")
    y = np.asarray(obs, dtype=float)
    skill = np.mean(np.abs(x - y), axis=0)
    spread = np.mean(np.abs(x[:, None] - x[None, :]), axis=(0, 1)) / 2.0
    out = skill - spread
    return float(out) if np.ndim(out) == 0 else out


def crps_trajectories(runs, truth, variables=None) -> float:
    """CRPS averaged over variables and steps for an ensemble of simulated runs."""
    runs = [r for r in runs if r is not None]
    if not runs:
        raise ValueError("no runs to score")
    mats, t = [], None
    for r in runs:
        p, t, _ = _aligned(r, truth, variables)
        mats.append(p)
    return float(np.mean(crps_empirical(np.stack(mats), t)))


def score(metric: str, runs, truth, variables=None) -> float:
    """Dispatch by name; point metrics average over ensemble members."""
    runs = [runs] if isinstance(runs, Trajectory) else [r for r in runs if r is not None]
    if metric == "crps":
        return crps_trajectories(runs, truth, variables)
    fn = {"mse": mse, "mae": mae, "rmse": rmse}.get(metric)
    if fn is None:
        raise ValueError(f"unknown metric {metric!r}")
    if not runs:
        raise ValueError("no runs to score")
    return float(np.mean([fn(r, truth, variables) for r in runs]))


METRICS = ("mse", "mae", "rmse", "crps")


@dataclass(frozen=True)
class EventError:
    error: float  # nan when the truth never crosses
    truth_censored: bool
    censored_runs: tuple[int, ...]
    predicted_times: tuple


def first_crossing(x, threshold: float, variable: str = VOLUME):
    for s in _steps(x):
        if s.state[variable] >= threshold:
            return s.time
    return None


def time_to_event_error(pred_runs, truth, diameter_threshold_cm: float = DEATH_DIAMETER_CM,
                        variable: str = VOLUME) -> EventError:
    """Mean absolute difference between simulated and true event times.

    A run that never crosses is censored at its last time label. If the
    truth never crosses the error is undefined (nan) and flagged.
    """
    if isinstance(pred_runs, Trajectory):
        pred_runs = [pred_runs]
    runs = [r for r in pred_runs if r is not None]
    if not runs:
        raise ValueError("no runs to score")
    limit = sphere_volume(diameter_threshold_cm)
    times, censored = [], []
    for k, r in enumerate(runs):
        t = first_crossing(r, limit, variable)
        if t is None:
            t = _steps(r)[-1].time
            censored.append(k)
        times.append(t)
    true_time = first_crossing(truth, limit, variable)
    if true_time is None:
        return EventError(float("nan"), True, tuple(censored), tuple(times))
    err = float(np.mean([abs(t - true_time) for t in times]))
    return EventError(err, False, tuple(censored), tuple(times))


def mean_ci95(values) -> tuple[float, float, int]:
    """Mean and normal-approximation 95% half-width over repeats."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    if v.size == 1:
        return float(v[0]), 0.0, 1
    half = norm.ppf(0.975) * v.std(ddof=1) / np.sqrt(v.size)
    return float(v.mean()), float(half), int(v.size)
