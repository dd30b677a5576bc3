"""Action-relevant filtering of the dataset and top-c context selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .core import HistoryFuturePair, Trajectory, VariableSchema

logger = logging.getLogger(__name__)

STRICT, ANY_ACTION, ANY_WINDOW = 0, 1, 2


class ValidSample(NamedTuple):
    trajectory: Trajectory
    t_star: int
    w: int
    dataset_index: int


@dataclass(frozen=True)
class ScoredCandidate:
    pair: HistoryFuturePair
    score: float
    dataset_index: int


def _smap(schemas) -> dict[str, VariableSchema]:
    if schemas is None:
        return {}
    if isinstance(schemas, dict):
        return schemas
    return {s.name: s for s in schemas}


def action_names(history: Trajectory, schemas=None) -> list[str]:
    smap = _smap(schemas)
    names = history.action_names
    order = [n for n in smap if n in set(names)]
    return order + [n for n in names if n not in set(order)]


def action_key(step, names: Sequence[str], schemas=None) -> tuple:
    """Discretized action vector of ``step`` over ``names``.

    A variable the step does not record counts as 0, i.e. untreated.
    """
    smap = _smap(schemas)
    key = []
    for n in names:
        v = float(step.action.get(n, 0.0))
        key.append(smap[n].discretize(v) if n in smap else round(v, 6) + 0.0)
    return tuple(key)


def trajectory_keys(traj: Trajectory, names: Sequence[str], schemas=None) -> list[tuple]:
    """Action keys of every step, memoized on the (immutable) trajectory."""
    smap = _smap(schemas)
    sig = tuple((n, smap[n].decimals, smap[n].bins) if n in smap else (n,) for n in names)
    memo = traj.__dict__.setdefault("_action_keys", {})
    keys = memo.get(sig)
    if keys is None:
        keys = memo[sig] = [action_key(s, names, schemas) for s in traj.steps]
    return keys


def unique_actions(history: Trajectory, lookback: int, schemas=None,
                   names: Sequence[str] | None = None) -> set[tuple]:
    if len(history) < lookback:
        raise ValueError(f"history has {len(history)} steps, lookback is {lookback}")
    names = action_names(history, schemas) if names is None else names
    return {action_key(s, names, schemas) for s in history.steps[len(history) - lookback:]}


def find_window(keys: Sequence[tuple], h_a: set, lookback: int) -> tuple[int, int] | None:
    """Covering window ``(t*, w)`` that ends earliest, then is narrowest.

    The window must leave at least one future step. Only its end matters for
    the extracted history, so the earliest end is searched first.
    """
    for end in range(len(keys) - 1):
        seen = set()
        for w in range(1, min(lookback, end + 1) + 1):
            seen.add(keys[end - w + 1])
            if h_a <= seen:
                return end - w + 1, w
    return None


def _relaxed_window(keys: Sequence[tuple], h_a: set, lookback: int, level: int):
    T = len(keys)
    if T < 2:
        return None
    if level == ANY_ACTION:
        for t_star in range(T - 1):
            if keys[t_star] in h_a:
                return t_star, 1
        return None
    return min(lookback, T - 1) - 1, 1


def filter_valid(dataset: Sequence[Trajectory], h_a: set, lookback: int,
                 names: Sequence[str], schemas=None, level: int = STRICT) -> list[ValidSample]:
    """Trajectories containing a window of at most ``lookback`` steps that covers ``h_a``.

    The chosen window is the one that ends earliest, then the narrowest. ``level`` > 0 applies the fallback relaxations used when the
    strict filter comes back empty.
    """
    out = []
    for i, traj in enumerate(dataset):
        keys = trajectory_keys(traj, names, schemas)
        if level == STRICT:
            win = find_window(keys, h_a, lookback)
        else:
            win = _relaxed_window(keys, h_a, lookback, level)
        if win is not None:
            out.append(ValidSample(traj, win[0], win[1], i))
    return out


def extract_pair(traj: Trajectory, t_star: int, w: int, lookback: int, buffer: int,
                 dataset_index: int = -1) -> HistoryFuturePair:
    """Cut the history ending at the window's last step and up to ``buffer`` future steps.

    Pairs are memoized on ``traj`` so repeated retrievals reuse the same
    objects (and whatever is cached on them).
    """
    memo = traj.__dict__.setdefault("_pairs", {})
    key = (t_star, w, lookback, buffer, dataset_index)
    if key not in memo:
        memo[key] = _cut_pair(traj, t_star, w, lookback, buffer, dataset_index)
    return memo[key]


def _cut_pair(traj, t_star, w, lookback, buffer, dataset_index) -> HistoryFuturePair:
    end = t_star + w - 1
    start = max(0, end - lookback + 1)
    future_steps = traj.steps[end + 1:end + 1 + buffer]
    return HistoryFuturePair(
        source_id=traj.id,
        history=traj[start:end + 1],
        future=Trajectory(traj.id, future_steps) if future_steps else None,
        dataset_index=dataset_index,
    )


def action_relevant_pairs(dataset: Sequence[Trajectory], history: Trajectory, lookback: int,
                          buffer: int, schemas=None) -> tuple[list[HistoryFuturePair], int]:
    """Build the action-relevant pairs for ``history``.

    Returns the pairs and the relaxation level that produced them (0 when the
    strict filter succeeded).
    """
    names = action_names(history, schemas)
    h_a = unique_actions(history, min(lookback, len(history)), schemas, names)
    for level in (STRICT, ANY_ACTION, ANY_WINDOW):
        valid = filter_valid(dataset, h_a, lookback, names, schemas, level=level)
        if valid:
            if level != STRICT:
                logger.info("no strictly valid samples; relaxed to level %d", level)
            pairs = [extract_pair(v.trajectory, v.t_star, v.w, lookback, buffer, v.dataset_index)
                     for v in valid]
            return pairs, level
    return [], ANY_WINDOW


def rank_candidates(pairs: Sequence[HistoryFuturePair], scores, c: int) -> list[ScoredCandidate]:
    """Top ``c`` pairs by score; ties go to the lower dataset index."""
    scored = [ScoredCandidate(p, float(s), p.dataset_index if p.dataset_index >= 0 else i)
              for i, (p, s) in enumerate(zip(pairs, scores))]
    scored.sort(key=lambda sc: (-sc.score, sc.dataset_index))
    return scored[:max(c, 0)]


def select_context(history: Trajectory, pairs: Sequence[HistoryFuturePair], target_encoder,
                   candidate_encoder, c: int, to_text: Callable[[Trajectory], str] = None
                   ) -> list[ScoredCandidate]:
    """Score every pair's history against ``history`` and keep the best ``c``."""
    if c <= 0 or not pairs:
        return []
    if to_text is None:
        from .encoder import retrieval_text
        to_text = retrieval_text
    t_emb = target_encoder.embed([to_text(history)])[0]
    c_emb = candidate_encoder.embed([to_text(p.history) for p in pairs])
    return rank_candidates(pairs, c_emb @ t_emb, c)


def select_context_random(pairs: Sequence[HistoryFuturePair], c: int, seed) -> list[HistoryFuturePair]:
    pairs = list(pairs)
    if c >= len(pairs):
        return pairs
    if c <= 0:
        return []
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pairs), size=c, replace=False)
    return [pairs[i] for i in sorted(idx)]


def select_context_full(pairs: Sequence[HistoryFuturePair]) -> list[HistoryFuturePair]:
    return list(pairs)
