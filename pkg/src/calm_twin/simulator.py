"""Context-adaptive simulation loop.

Each generated step: (1) optionally re-run retrieval (knowledge + context
samples), (2) build the prompt, (3) draw the next state from the backend,
draw the action from the policy, roll the lookback window. Retrieval is
re-run when the newest action is outside the previous window's unique
actions or when ``(f + 1) % buffer == 0``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .codec import CodecError, decode_states
from .core import (ModellingEnvironment, SimulationConfig, TimeStep, Trajectory,
                   environment_update)
from .encoder import compose_retrieval_text
from .knowledge import extract_relevant
from .llm.prompts import CORRECTIVE_SUFFIX, formulate_prompt
from .llm.selection import llm_select_context
from .retrieval import (action_key, action_names, action_relevant_pairs, select_context_full,
                        select_context_random, unique_actions)

logger = logging.getLogger(__name__)

MODES = ("encoder", "encoder-no-ft", "encoder-no-summary", "random", "llm", "full", "zero-shot",
         "fixed")
ENCODER_MODES = ("encoder", "encoder-no-ft", "encoder-no-summary")


class SimulationAborted(RuntimeError):
    pass


# -- policies ----------------------------------------------------------------

class Policy(Protocol):
    def __call__(self, history: Trajectory, state: dict, step: int) -> dict:
        """Action paired with ``state``, the state generated at ``step``."""


class ConstantPolicy:
    def __init__(self, action: dict):
        self.action = dict(action)

    def __call__(self, history, state, step):
        return dict(self.action)


class RepeatLastPolicy:
    def __call__(self, history, state, step):
        return dict(history.steps[-1].action)


class ReplayPolicy:
    def __init__(self, actions: Sequence[dict]):
        self.actions = [dict(a) for a in actions]

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "ReplayPolicy":
        return cls([s.action for s in traj.steps])

    def __call__(self, history, state, step):
        if step >= len(self.actions):
            raise IndexError(f"replay policy has no action for step {step}")
        return dict(self.actions[step])


class ThresholdPolicy:
    """``above`` when ``state[variable] >= threshold``, otherwise ``below``."""

    def __init__(self, variable: str, threshold: float, above: dict, below: dict):
        self.variable = variable
        self.threshold = threshold
        self.above = dict(above)
        self.below = dict(below)

    def __call__(self, history, state, step):
        return dict(self.above if state[self.variable] >= self.threshold else self.below)


# -- results -----------------------------------------------------------------

@dataclass
class SimulationResult:
    runs: list[Trajectory | None]  # None when a member aborted before its first step
    provenance: list[list[dict]]
    retrievals: list[list[dict]]
    diagnostics: dict = field(default_factory=dict)

    def retrieval_steps(self, run: int = 0) -> list[int]:
        return [ev["step"] for ev in self.retrievals[run]]

    def to_dict(self) -> dict:
        return {"runs": [r.to_dict() if r is not None else None for r in self.runs],
                "provenance": self.provenance, "retrievals": self.retrievals,
                "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def simulate_ensemble_stats(result: SimulationResult, quantiles=(0.05, 0.5, 0.95)) -> dict:
    """Per-variable, per-step ensemble mean and empirical quantiles."""
    runs = [r for r in result.runs if r is not None]
    if not runs:
        raise ValueError("no completed runs")
    n = min(len(r) for r in runs)
    out = {}
    for name in runs[0].state_names:
        arr = np.array([[s.state[name] for s in r.steps[:n]] for r in runs])
        out[name] = {"mean": arr.mean(axis=0),
                     "quantiles": {q: np.quantile(arr, q, axis=0) for q in quantiles}}
    return out


# -- loop --------------------------------------------------------------------

def _member_seed(seed: int, member: int, *extra: int) -> int:
    return int(np.random.SeedSequence([int(seed), member, *extra]).generate_state(1)[0])


def _next_time(window: Trajectory):
    times = window.times
    return times[-1] + (times[-1] - times[-2] if len(times) > 1 else 1)


class _Run:
    def __init__(self, env, h0, policy, cfg, backend, retriever, mode, seed, member, context,
                 selector, max_regenerations):
        self.env, self.policy, self.cfg = env, policy, cfg
        self.backend, self.retriever, self.mode = backend, retriever, mode
        self.selector = selector or backend
        self.seed, self.member = seed, member
        self.fixed_context = list(context or ())
        self.max_regenerations = max_regenerations
        self.window = h0[len(h0) - cfg.lookback:]
        self.names = action_names(self.window, env.schemas)

    def retrieve(self, index: int):
        env, cfg, window = self.env, self.cfg, self.window
        knowledge = extract_relevant(env.knowledge, window, env.schemas)
        level, scores = None, None
        if self.mode == "fixed":
            context = self.fixed_context
        elif self.mode == "zero-shot" or cfg.context_size == 0:
            context = []
        else:
            pairs, level = action_relevant_pairs(env.dataset, window, cfg.lookback, cfg.buffer,
                                                 env.schemas)
            c = cfg.context_size
            if self.mode in ENCODER_MODES:
                ranked = self.retriever.select(window, pairs, c, env.schemas)
                context = [sc.pair for sc in ranked]
                scores = [sc.score for sc in ranked]
            elif self.mode == "random":
                context = select_context_random(pairs, c, _member_seed(self.seed, self.member,
                                                                       index))
            elif self.mode == "full":
                context = select_context_full(pairs)
            elif self.mode == "llm":
                texts = [compose_retrieval_text(p.history, None, env.schemas) for p in pairs]
                target = compose_retrieval_text(window, None, env.schemas)
                context = [pairs[i] for i in llm_select_context(self.selector, target, texts, c)]
            else:
                raise ValueError(f"unknown selection mode {self.mode!r}")
        return knowledge, context, {"index": index, "knowledge_keys": [k.key for k in knowledge],
                                    "context_ids": [p.source_id for p in context],
                                    "relaxation_level": level, "scores": scores}

    def generate(self, bundle, diagnostics) -> dict:
        expected = [s.name for s in self.env.state_schemas if s.name in self.window.state_names]
        attempt_bundle = bundle
        for attempt in range(self.max_regenerations + 1):
            text = self.backend.complete(attempt_bundle)[0]
            try:
                steps, diag = decode_states(text, expected, expected_steps=1)
                diagnostics["stripped_characters"] += diag.stripped_characters
                return steps[0].state
            except CodecError as exc:
                logger.info("member %d: undecodable reply (%s)", self.member, exc)
                if attempt < self.max_regenerations:
                    diagnostics["parse_retries"] += 1
                    attempt_bundle = bundle.with_suffix(CORRECTIVE_SUFFIX)
                last = exc
        raise SimulationAborted(f"reply could not be decoded after "
                                f"{self.max_regenerations} regenerations: {last}")

    def run(self):
        cfg, env = self.cfg, self.env
        generated, provenance, events = [], [], []
        diagnostics = {"parse_retries": 0, "stripped_characters": 0, "aborted": False}
        need_retrieval = True
        knowledge = context = event = None
        member_seed = _member_seed(self.seed, self.member)
        for f in range(cfg.horizon):
            if need_retrieval:
                knowledge, context, event = self.retrieve(len(events))
                event["step"] = f
                events.append(event)
            bundle = formulate_prompt(knowledge, context, self.window, env.schemas,
                                      temperature=cfg.temperature, seed=member_seed + f)
            try:
                state = self.generate(bundle, diagnostics)
            except SimulationAborted as exc:
                diagnostics["aborted"] = True
                diagnostics["error"] = str(exc)
                break
            action = self.policy(self.window, state, f)
            if set(action) != set(self.window.action_names):
                raise ValueError(f"policy returned actions {sorted(action)}, expected "
                                 f"{sorted(self.window.action_names)}")
            step = TimeStep(_next_time(self.window), state, action)
            previous = unique_actions(self.window, len(self.window), env.schemas, self.names)
            self.window = Trajectory(self.window.id, self.window.steps[1:] + (step,))
            generated.append(step)
            provenance.append({"step": f, "retrieval_index": event["index"],
                               "context_ids": event["context_ids"],
                               "knowledge_keys": event["knowledge_keys"]})
            new_action = action_key(step, self.names, env.schemas) not in previous
            need_retrieval = new_action or (f + 1) % cfg.buffer == 0
        diagnostics["retrieval_count"] = len(events)
        return generated, provenance, events, diagnostics


def simulate(env: ModellingEnvironment, h0: Trajectory, policy, cfg: SimulationConfig, backend,
             retriever=None, mode: str = "encoder", seed: int = 0, context=None, selector=None,
             max_regenerations: int = 3, jobs: int = 1) -> SimulationResult:
    """Simulate ``cfg.horizon`` steps past ``h0`` for each of ``cfg.ensemble`` members.

    ``mode="fixed"`` keeps ``context`` for every step (used when scoring
    candidates). A member whose replies cannot be decoded is stopped early and
    flagged in ``diagnostics["aborted_members"]``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if len(h0) < cfg.lookback:
        raise ValueError(f"history has {len(h0)} steps but lookback is {cfg.lookback}")
    if mode in ENCODER_MODES and retriever is None:
        raise ValueError(f"mode {mode!r} needs a retriever")
    env.validate_trajectory(h0)

    def member(k):
        run = _Run(env, h0, policy, cfg, backend, retriever, mode, seed, k, context, selector,
                   max_regenerations)
        return run.run()

    if jobs > 1 and cfg.ensemble > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(member, range(cfg.ensemble)))
    else:
        outputs = [member(k) for k in range(cfg.ensemble)]
    runs, provenance, retrievals, diags = [], [], [], []
    for k, (steps, prov, events, diag) in enumerate(outputs):
        runs.append(Trajectory(f"{h0.id}/run{k}", steps) if steps else None)
        provenance.append(prov)
        retrievals.append(events)
        diags.append(diag)
    diagnostics = {
        "retrieval_count": [d["retrieval_count"] for d in diags],
        "parse_retries": sum(d["parse_retries"] for d in diags),
        "stripped_characters": sum(d["stripped_characters"] for d in diags),
        "aborted_members": [k for k, d in enumerate(diags) if d["aborted"]],
    }
    errors = {k: d["error"] for k, d in enumerate(diags) if "error" in d}
    if errors:
        diagnostics["errors"] = errors
    return SimulationResult(runs, provenance, retrievals, diagnostics)


# -- estimator ---------------------------------------------------------------

class CalmDT(BaseEstimator):
    """Language-model digital twin with a scikit-learn style interface.

    ``fit`` binds a :class:`ModellingEnvironment`; ``predict`` simulates the
    horizon after each history. :meth:`update_environment` swaps in the next
    environment without touching the retriever.
    """

    def __init__(self, context_size=5, lookback=3, buffer=1, horizon=3, ensemble=1,
                 temperature=0.0, mode="encoder", backend=None, retriever=None, selector=None,
                 max_regenerations=3, n_jobs=1, random_state=0):
        self.context_size = context_size
        self.lookback = lookback
        self.buffer = buffer
        self.horizon = horizon
        self.ensemble = ensemble
        self.temperature = temperature
        self.mode = mode
        self.backend = backend
        self.retriever = retriever
        self.selector = selector
        self.max_regenerations = max_regenerations
        self.n_jobs = n_jobs
        self.random_state = random_state

    @property
    def config(self) -> SimulationConfig:
        return SimulationConfig(self.context_size, self.lookback, self.buffer, self.horizon,
                                self.ensemble, self.temperature)

    def fit(self, env: ModellingEnvironment, y=None):
        if not isinstance(env, ModellingEnvironment):
            raise TypeError("fit expects a ModellingEnvironment")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.backend is None:
            raise ValueError("a backend is required")
        self.config  # validates hyperparameters
        self.env_ = env
        if self.mode in ENCODER_MODES and self.retriever is None:
            from .encoder import BiEncoderRetriever
            self.retriever_ = BiEncoderRetriever(use_summary=self.mode != "encoder-no-summary")
            self.retriever_.initialize()
        else:
            self.retriever_ = self.retriever
        return self

    def update_environment(self, patch) -> "CalmDT":
        self._check()
        self.env_ = environment_update(self.env_, patch)
        return self

    def _check(self):
        if not hasattr(self, "env_"):
            raise NotFittedError("call fit(env) first")

    def simulate(self, history: Trajectory, policy=None) -> SimulationResult:
        self._check()
        seed = 0 if self.random_state is None else int(self.random_state)
        return simulate(self.env_, history, policy or RepeatLastPolicy(), self.config,
                        self.backend, self.retriever_, self.mode, seed, selector=self.selector,
                        max_regenerations=self.max_regenerations, jobs=self.n_jobs)

    def predict(self, histories, policies=None) -> list[SimulationResult]:
        if isinstance(histories, Trajectory):
            histories = [histories]
        policies = policies if policies is not None else [None] * len(histories)
        return [self.simulate(h, p) for h, p in zip(histories, policies)]
