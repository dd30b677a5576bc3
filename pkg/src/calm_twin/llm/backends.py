"""Offline language-model backends.

All of them read the prompt produced by :func:`formulate_prompt` and answer
in the codec grammar, so the full simulation loop runs without a network.
"""

from __future__ import annotations

import re
import threading
from typing import Callable, Protocol, Sequence

import numpy as np

from ..codec import format_time, format_value, parse_steps
from ..core import Trajectory
from .prompts import PromptBundle, parse_prompt


class LlmBackend(Protocol):
    def complete(self, bundle: PromptBundle) -> list[str]:
        ...


def trigrams(text: str) -> set[str]:
    return {text[i:i + 3] for i in range(len(text) - 2)}


def _decimals(token: str) -> int:
    token = token.strip()
    return len(token.split(".", 1)[1]) if "." in token else 0


def _tokens(text: str) -> list[tuple[str, list[tuple[str, str]]]]:
    """Split codec text into ``[(time_token, [(name, value_token)])]``."""
    out = []
    for seg in text.split("|"):
        seg = seg.strip()
        if not seg.startswith("Time"):
            continue
        head, _, body = seg.partition(":")
        items = []
        for item in body.split(","):
            name, sep, tok = item.rpartition(":")
            if sep:
                items.append((name.strip(), tok.strip()))
        out.append((head[4:].strip(), items))
    return out


def _next_time(target_states: str):
    steps, _ = parse_steps(target_states)
    times = [t for t, _ in steps]
    step = times[-1] - times[-2] if len(times) > 1 else 1
    return times[-1] + step


def _render_step(time, values: Sequence[tuple[str, float, int]]) -> str:
    body = ", ".join(f"{n}: {format_value(v, d)}" for n, v, d in values)
    return f"Time {format_time(time)}: {body}"


class _NoisyMixin:
    noise: float = 0.0

    def _perturb(self, values, bundle: PromptBundle, member: int):
        if not self.noise or bundle.temperature == 0:
            return values
        rng = np.random.default_rng([bundle.seed or 0, member])
        scale = self.noise * bundle.temperature
        return [(n, v * (1.0 + scale * rng.standard_normal()), d) for n, v, d in values]


class NearestContextMock(_NoisyMixin):
    """Copies the first future step of the most similar in-context example.

    Similarity is the number of shared character trigrams between an
    example's state history text and the target state history text; ties go
    to the earlier example. Target variables the example does not record
    keep their last observed value. Without examples the last state repeats.
    """

    def __init__(self, noise: float = 0.0):
        self.noise = noise

    def complete(self, bundle: PromptBundle) -> list[str]:
        parsed = parse_prompt(bundle.user_text)
        target = _tokens(parsed.target_states)
        last = {n: tok for n, tok in target[-1][1]}
        time = _next_time(parsed.target_states)
        source = {}
        usable = [ex for ex in parsed.examples if ex.state_future]
        if usable:
            tgt = trigrams(parsed.target_states)
            best = max(range(len(usable)),
                       key=lambda i: (len(trigrams(usable[i].state_history) & tgt), -i))
            source = dict(_tokens(usable[best].state_future)[0][1])
        values = []
        for name, tok in last.items():
            src = source.get(name, tok)
            values.append((name, float(src), _decimals(src)))
        return [_render_step(time, self._perturb(values, bundle, k))
                for k in range(bundle.samples)]


class AnalogContextMock(_NoisyMixin):
    """Applies the examples' average one-step change to the target's last state.

    ``kind="ratio"`` transfers relative changes (multiplicative dynamics),
    ``kind="delta"`` absolute ones. Zero denominators fall back to deltas.
    """

    def __init__(self, kind: str = "ratio", noise: float = 0.0):
        if kind not in ("ratio", "delta"):
            raise ValueError("kind must be 'ratio' or 'delta'")
        self.kind = kind
        self.noise = noise

    def complete(self, bundle: PromptBundle) -> list[str]:
        parsed = parse_prompt(bundle.user_text)
        target = _tokens(parsed.target_states)
        last = [(n, float(t), _decimals(t)) for n, t in target[-1][1]]
        time = _next_time(parsed.target_states)
        changes: dict[str, list[tuple[float, float]]] = {}
        for ex in parsed.examples:
            if not ex.state_future:
                continue
            before = {n: float(t) for n, t in _tokens(ex.state_history)[-1][1]}
            after = {n: float(t) for n, t in _tokens(ex.state_future)[0][1]}
            for n in before.keys() & after.keys():
                changes.setdefault(n, []).append((before[n], after[n]))
        values = []
        for name, v, d in last:
            pairs = changes.get(name)
            if pairs:
                if self.kind == "ratio" and all(b != 0 for b, _ in pairs):
                    v = v * float(np.mean([a / b for b, a in pairs]))
                else:
                    v = v + float(np.mean([a - b for b, a in pairs]))
            values.append((name, v, d))
        return [_render_step(time, self._perturb(values, bundle, k))
                for k in range(bundle.samples)]


class GroundTruthOracle:
    """Answers with the true next state of a known trajectory.

    The target history in the prompt is matched, at codec precision, against
    ``truth``. Alternatively ``step_fn(history) -> {name: value}`` computes
    the next state directly.
    """

    def __init__(self, truth: Sequence[Trajectory] = (), schemas=None,
                 step_fn: Callable[[Trajectory], dict] | None = None):
        self.schemas = {s.name: s for s in schemas or ()}
        self.step_fn = step_fn
        self._index: dict[tuple, list[tuple[Trajectory, int]]] = {}
        for traj in truth:
            for i, step in enumerate(traj.steps):
                self._index.setdefault(self._key(step.time, step.state), []).append((traj, i))

    def _dec(self, name: str) -> int:
        s = self.schemas.get(name)
        return s.decimals if s else 6

    def _key(self, time, state: dict) -> tuple:
        return (time,) + tuple(sorted((n, format_value(v, self._dec(n))) for n, v in state.items()))

    def _lookup(self, parsed_steps) -> tuple[Trajectory, int]:
        last_time, last_vals = parsed_steps[-1]
        for traj, i in self._index.get(self._key(last_time, last_vals), []):
            window = traj.steps[i - len(parsed_steps) + 1:i + 1]
            if len(window) == len(parsed_steps) and all(
                    self._key(s.time, s.state) == self._key(t, v)
                    for s, (t, v) in zip(window, parsed_steps)):
                if i + 1 < len(traj):
                    return traj, i + 1
        raise LookupError("target history does not match any known trajectory")

    def complete(self, bundle: PromptBundle) -> list[str]:
        parsed = parse_prompt(bundle.user_text)
        steps, _ = parse_steps(parsed.target_states)
        if self.step_fn is not None:
            from ..codec import decode_states
            decoded, _ = decode_states(parsed.target_states, list(steps[-1][1]))
            state = self.step_fn(Trajectory("target", decoded))
            time = _next_time(parsed.target_states)
        else:
            traj, i = self._lookup(steps)
            state, time = traj.steps[i].state, traj.steps[i].time
        values = [(n, v, self._dec(n)) for n, v in state.items()]
        return [_render_step(time, values)] * bundle.samples


class LlmSelectorMock:
    """Answers context-selection prompts by trigram overlap with the target."""

    _TARGET = re.compile(r"Target system history: (.*?)\.\n\n", re.S)
    _COUNT = re.compile(r"Return only the indices of the (\d+) most similar")
    _CAND = re.compile(r"^Related system (\d+) history: (.*)$", re.M)

    def complete(self, bundle: PromptBundle) -> list[str]:
        text = bundle.user_text
        target = trigrams(self._TARGET.search(text).group(1))
        c = int(self._COUNT.search(text).group(1))
        cands = [(int(i), t) for i, t in self._CAND.findall(text)]
        ranked = sorted(cands, key=lambda it: (-len(trigrams(it[1]) & target), it[0]))
        return [", ".join(str(i) for i, _ in ranked[:c])]


class ScriptedBackend:
    """Replays canned replies in order and records every bundle it receives."""

    def __init__(self, replies):
        self._replies = list(replies) if not callable(replies) else None
        self._fn = replies if callable(replies) else None
        self.bundles: list[PromptBundle] = []
        self._lock = threading.Lock()

    def complete(self, bundle: PromptBundle) -> list[str]:
        with self._lock:
            self.bundles.append(bundle)
            if self._fn is not None:
                reply = self._fn(bundle)
            else:
                if not self._replies:
                    raise RuntimeError("scripted backend ran out of replies")
                reply = self._replies.pop(0)
        return list(reply) if isinstance(reply, (list, tuple)) else [reply]


BACKENDS = ("oracle", "nearest", "analog", "scripted-selector", "remote")


def make_backend(kind: str, truth: Sequence[Trajectory] = (), schemas=None, noise: float = 0.0,
                 **remote_kwargs):
    """Build a backend by name; ``remote`` reads its endpoint from the environment."""
    if kind == "oracle":
        return GroundTruthOracle(truth, schemas)
    if kind == "nearest":
        return NearestContextMock(noise)
    if kind == "analog":
        return AnalogContextMock("ratio", noise)
    if kind == "scripted-selector":
        return LlmSelectorMock()
    if kind == "remote":
        from .remote import RemoteChatBackend
        return RemoteChatBackend(**remote_kwargs)
    raise ValueError(f"unknown backend {kind!r}; expected one of {BACKENDS}")
