"""Non-LLM reference forecasters: repeat-last and K nearest neighbours."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..core import HistoryFuturePair, TimeStep, Trajectory
from .metrics import state_matrix


# neighbour counts used for yearly registry-style and daily tumour-style data
DEFAULT_K = {"cf": 12, "nsclc": 13}


def _future_times(h: Trajectory, F: int) -> list:
    times = h.times
    delta = times[-1] - times[-2] if len(times) > 1 else 1
    return [times[-1] + delta * (k + 1) for k in range(F)]


def baseline_constant(h: Trajectory, F: int) -> list[TimeStep]:
    """``F`` copies of the last observed state."""
    if F < 0:
        raise ValueError("F must be >= 0")
    last = h.steps[-1].state
    return [TimeStep(t, dict(last), {}) for t in _future_times(h, F)]


def _as_pair(item, length: int, F: int) -> tuple[Trajectory, Sequence[TimeStep]]:
    if isinstance(item, HistoryFuturePair):
        hist, fut = item.history, item.future.steps if item.future is not None else ()
    elif isinstance(item, Trajectory):
        hist, fut = item[:length], item.steps[length:]
    else:
        hist, fut = item
        fut = fut.steps if isinstance(fut, Trajectory) else fut
    if len(fut) < F:
        raise ValueError(f"neighbour {hist.id!r} has {len(fut)} future steps, need {F}")
    return hist, fut[:F]


def baseline_knn(h: Trajectory, D, K: int, F: int, weighting: str = "inverse",
                 eps: float = 1e-8, variables: Sequence[str] | None = None) -> list[TimeStep]:
    """Similarity-weighted mean of the futures of the ``K`` closest histories.

    ``D`` holds history-future pairs, ``(history, future)`` tuples or whole
    trajectories (split after ``len(h)`` steps). Distance is Euclidean on the
    flattened state histories; weights are ``1 / (d + eps)``, normalized.
    Ties in distance keep dataset order.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if weighting not in ("inverse", "uniform"):
        raise ValueError(f"unknown weighting {weighting!r}")
    D = list(D)
    if not D:
        raise ValueError("empty neighbour set")
    names = list(variables) if variables is not None else h.state_names
    pairs = [_as_pair(d, len(h), F) for d in D]
    query = state_matrix(h, names).ravel()
    hists = []
    for hist, _ in pairs:
        x = state_matrix(hist, names).ravel()
        if x.shape != query.shape:
            raise ValueError(f"history {hist.id!r} is not aligned with the query")
        hists.append(x)
    dist = np.linalg.norm(np.stack(hists) - query, axis=1)
    nearest = np.argsort(dist, kind="stable")[:K]
    if weighting == "inverse":
        w = 1.0 / (dist[nearest] + eps)
    else:
        w = np.ones(len(nearest))
    w = w / w.sum()
    futures = np.stack([state_matrix(pairs[i][1], names) for i in nearest])
    pred = np.tensordot(w, futures, axes=1) if F else np.zeros((0, len(names)))
    return [TimeStep(t, {n: float(pred[k, j]) for j, n in enumerate(names)}, {})
            for k, t in enumerate(_future_times(h, F))]


class ConstantForecaster(BaseEstimator):
    def __init__(self, horizon=3):
        self.horizon = horizon

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, histories) -> list[list[TimeStep]]:
        return [baseline_constant(h, self.horizon) for h in histories]


class KNNForecaster(BaseEstimator):
    """K nearest neighbours over history windows cut from training trajectories.

    Each training trajectory contributes every window of the query length
    that still has ``horizon`` future steps (``stride`` apart).
    """

    def __init__(self, n_neighbors=13, horizon=3, weighting="inverse", stride=1):
        self.n_neighbors = n_neighbors
        self.horizon = horizon
        self.weighting = weighting
        self.stride = stride

    def fit(self, trajectories, y=None):
        self.trajectories_ = list(trajectories)
        if not self.trajectories_:
            raise ValueError("no training trajectories")
        return self

    def neighbours(self, length: int) -> list[tuple[Trajectory, list[TimeStep]]]:
        out = []
        for traj in self.trajectories_:
            for start in range(0, len(traj) - length - self.horizon + 1, self.stride):
                out.append((traj[start:start + length],
                            traj.steps[start + length:start + length + self.horizon]))
        return out

    def predict(self, histories) -> list[list[TimeStep]]:
        if not hasattr(self, "trajectories_"):
            raise NotFittedError("call fit() first")
        cache: dict[int, list] = {}
        out = []
        for h in histories:
            pool = cache.setdefault(len(h), self.neighbours(len(h)))
            out.append(baseline_knn(h, pool, self.n_neighbors, self.horizon, self.weighting))
        return out
