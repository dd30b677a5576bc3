"""Labelled training examples for the bi-encoder.

A candidate is as good as the simulation it enables: each target's future is
simulated with one candidate as the only in-context example, and the
candidates are ranked by the resulting error.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .core import ModellingEnvironment, SimulationConfig, Trajectory
from .encoder import ContrastiveExample, retrieval_text
from .evaluation.metrics import score
from .retrieval import action_names, extract_pair, filter_valid, unique_actions
from .simulator import ReplayPolicy, simulate

logger = logging.getLogger(__name__)

SCORERS = ("mse", "mae", "crps")


def split_target(traj: Trajectory, lookback: int, horizon: int) -> tuple[Trajectory, Trajectory]:
    """History of ``lookback`` steps ending right before the last ``horizon`` steps."""
    cut = len(traj) - horizon
    if cut < lookback:
        raise ValueError(f"trajectory {traj.id!r} too short for lookback {lookback} + "
                         f"horizon {horizon}")
    return traj[cut - lookback:cut], traj[cut:]


def score_candidate(env: ModellingEnvironment, history: Trajectory, truth: Trajectory, pair,
                    backend, scorer: str, sim_runs: int, lookback: int, buffer: int,
                    temperature: float, seed: int) -> float:
    cfg = SimulationConfig(context_size=1, lookback=lookback, buffer=buffer,
                           horizon=len(truth), ensemble=sim_runs, temperature=temperature)
    result = simulate(env, history, ReplayPolicy.from_trajectory(truth), cfg, backend,
                      mode="fixed", context=[pair], seed=seed)
    runs = [r for r in result.runs if r is not None and len(r) == len(truth)]
    if not runs:
        return float("inf")
    return score(scorer, runs, truth)


def build_contrastive_set(env: ModellingEnvironment, backend, scorer: str = "crps", C: int = 5,
                          B: int = 2, sim_runs: int = 5, seed: int = 0, lookback: int = 3,
                          horizon: int = 3, buffer: int = 1, n_targets: int | None = None,
                          use_summary: bool = True, temperature: float = 0.0,
                          jobs: int = 1) -> list[ContrastiveExample]:
    """Label candidates for ``n_targets`` targets drawn uniformly from the dataset.

    Targets with fewer than ``C`` valid candidates, or without a strictly
    best candidate, are skipped.
    """
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
    if not 1 <= B < C:
        raise ValueError("need 1 <= B < C")
    dataset = list(env.dataset)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    if n_targets is not None:
        order = order[:n_targets]
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    examples = []
    try:
        for ti in order:
            target = dataset[int(ti)]
            try:
                history, truth = split_target(target, lookback, horizon)
            except ValueError as exc:
                logger.info("skipping target: %s", exc)
                continue
            names = action_names(history, env.schemas)
            h_a = unique_actions(history, lookback, env.schemas, names)
            others = [d for j, d in enumerate(dataset) if j != int(ti)]
            valid = filter_valid(others, h_a, lookback, names, env.schemas)
            if len(valid) < C:
                logger.info("skipping %s: %d valid candidates < C=%d", target.id, len(valid), C)
                continue
            chosen = [valid[i] for i in sorted(rng.choice(len(valid), C, replace=False))]
            pairs = [extract_pair(v.trajectory, v.t_star, v.w, lookback, buffer, v.dataset_index)
                     for v in chosen]
            run_seed = int(rng.integers(2 ** 31))

            def job(pair):
                return score_candidate(env, history, truth, pair, backend, scorer, sim_runs,
                                       lookback, buffer, temperature, run_seed)

            scores = list(pool.map(job, pairs)) if pool else [job(p) for p in pairs]
            ranked = np.argsort(scores, kind="stable")
            best = ranked[0]
            if not scores[best] < scores[ranked[1]]:
                logger.info("skipping %s: no strictly best candidate", target.id)
                continue
            worst = ranked[::-1][:B]
            texts = [retrieval_text(p.history, env.schemas, use_summary) for p in pairs]
            examples.append(ContrastiveExample(
                target_text=retrieval_text(history, env.schemas, use_summary),
                positive_text=texts[best],
                negative_texts=[texts[i] for i in worst],
                scores=[float(scores[best])] + [float(scores[i]) for i in worst],
                target_id=target.id))
    finally:
        if pool:
            pool.shutdown()
    return examples


def regime_retrieval_task(trajectories: Sequence[Trajectory], labels: Sequence[int],
                          n_queries: int, decoys: int = 3, lookback: int = 3, seed: int = 0,
                          variable: str = "tumour_volume"):
    """Queries with one same-cluster item hidden among level-matched decoys.

    Each query is a random ``lookback`` window. Its library holds one window
    from another trajectory of the same cluster (random start) and the
    ``decoys`` windows of other-cluster trajectories that start at the same
    time with the closest final ``variable`` value. Returns
    ``(queries, libraries, gold_indices)``.
    """
    rng = np.random.default_rng(seed)
    labels = list(labels)
    T = min(len(t) for t in trajectories)
    if len(set(labels)) < 2:
        raise ValueError("need at least two clusters")
    queries, libraries, gold = [], [], []
    for _ in range(n_queries):
        i = int(rng.integers(len(trajectories)))
        start = int(rng.integers(0, T - lookback + 1))
        query = trajectories[i][start:start + lookback]
        same = [j for j, lab in enumerate(labels) if lab == labels[i] and j != i]
        j = int(rng.choice(same))
        s2 = int(rng.integers(0, T - lookback + 1))
        level = query.steps[-1].state[variable]
        others = [k for k, lab in enumerate(labels) if lab != labels[i]]
        others.sort(key=lambda k: (abs(trajectories[k].steps[start + lookback - 1].state[variable]
                                       - level), k))
        items = [trajectories[j][s2:s2 + lookback]]
        items += [trajectories[k][start:start + lookback] for k in others[:decoys]]
        perm = rng.permutation(len(items))
        queries.append(query)
        libraries.append([items[p] for p in perm])
        gold.append(int(np.flatnonzero(perm == 0)[0]))
    return queries, libraries, gold


def precision_at_1(retriever, queries: Sequence[Trajectory], libraries, gold,
                   schemas=None) -> float:
    """Fraction of queries whose top-scoring library item is the gold one."""
    hits = 0
    for q, lib, g in zip(queries, libraries, gold):
        cand = retriever.embed_candidates([retriever.text(c, schemas) for c in lib])
        scores = cand @ retriever.transform([retriever.text(q, schemas)])[0]
        hits += int(np.argmax(scores)) == g
    return hits / len(queries) if queries else 0.0
