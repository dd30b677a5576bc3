"""Prompt construction for simulation and helpers to read prompts back."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Sequence

from ..codec import encode_actions, encode_states
from ..core import ACTION, GENERAL, STATE, HistoryFuturePair, KnowledgeEntry, Trajectory

SYSTEM_PROMPT = (
    "You are an expert at simulating dynamical systems. Respond only with the simulation in the "
    "exact format requested. Do not use the characters * or - anywhere. Ensure that you simulate "
    "exactly the desired number of timesteps for each state variable."
)
INSTRUCTION = ("Simulate the next timestep's state, for all state variables. "
               "Follow the exact format of the state history.")
INSTRUCTION_MULTI = ("Simulate the next {n} timesteps' states, for all state variables. "
                     "Follow the exact format of the state history.")
CORRECTIVE_SUFFIX = ("Your previous answer did not match the required format. "
                     "Respond with exactly one line: Time <t>: ...")


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    temperature: float = 0.0
    n_samples: int = 1
    max_tokens: int | None = None
    decoding: str = "greedy"
    beam_width: int = 1
    seed: int | None = None

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.decoding not in ("greedy", "beam", "sample"):
            raise ValueError(f"unknown decoding {self.decoding!r}")

    @property
    def samples(self) -> int:
        return 1 if self.decoding == "greedy" else max(1, self.n_samples)

    def with_suffix(self, suffix: str) -> "PromptBundle":
        return replace(self, user_text=f"{self.user_text}\n\n{suffix}")

    def with_params(self, **changes) -> "PromptBundle":
        return replace(self, **changes)


def _kind_of(name: str, schemas, history: Trajectory) -> str | None:
    for s in schemas or ():
        if s.name == name:
            return s.kind
    if name in history.state_names:
        return STATE
    if name in history.action_names:
        return ACTION
    return None


def formulate_prompt(knowledge: Sequence[KnowledgeEntry], context: Sequence[HistoryFuturePair],
                     history: Trajectory, schemas=None, request_steps: int = 1,
                     temperature: float = 0.0, n_samples: int = 1, seed: int | None = None,
                     max_tokens: int | None = None) -> PromptBundle:
    """Lay out knowledge, in-context examples and the target history as one prompt."""
    if request_steps < 1:
        raise ValueError("request_steps must be >= 1")
    general = [k.text for k in knowledge if k.key == GENERAL]
    states, actions = [], []
    for k in knowledge:
        if k.key == GENERAL:
            continue
        kind = _kind_of(k.key, schemas, history)
        if kind == STATE:
            states.append(f"{k.key}: {k.text}")
        elif kind == ACTION:
            actions.append(f"{k.key}: {k.text}")
    blocks = []
    if general:
        blocks.append("\n".join(general))
    if states:
        blocks.append("STATE VARIABLES:\n" + "\n".join(states))
    if actions:
        blocks.append("ACTION VARIABLES:\n" + "\n".join(actions))
    parts = []
    if blocks:
        parts.append("\n\n".join(blocks) + "\n\n\n")
    for i, pair in enumerate(context, 1):
        parts.append(f"Example {i} state history: \n{encode_states(pair.history, schemas)}\n\n")
        parts.append(f"Example {i} action history: \n{encode_actions(pair.history, schemas)}\n\n")
        if pair.future is not None:
            parts.append(f"Example {i} state future:\n{encode_states(pair.future, schemas)}\n\n")
    parts.append(f"Given the following state history:\n{encode_states(history, schemas)}\n\n")
    parts.append(f"And the following action history:\n{encode_actions(history, schemas)}\n\n")
    parts.append(INSTRUCTION if request_steps == 1 else INSTRUCTION_MULTI.format(n=request_steps))
    decoding = "greedy" if temperature == 0 and n_samples <= 1 else "sample"
    return PromptBundle(SYSTEM_PROMPT, "".join(parts), temperature=temperature,
                        n_samples=n_samples, decoding=decoding, seed=seed, max_tokens=max_tokens)


# -- reading prompts back (used by the offline backends) ----------------------

_EXAMPLE_RE = re.compile(
    r"Example (\d+) state history: \n(.*?)\n\nExample \1 action history: \n(.*?)\n\n"
    r"(?:Example \1 state future:\n(.*?)\n\n)?", re.S)
_TARGET_RE = re.compile(
    r"Given the following state history:\n(.*?)\n\nAnd the following action history:\n(.*?)\n\n",
    re.S)


@dataclass(frozen=True)
class ParsedExample:
    state_history: str
    action_history: str
    state_future: str | None


@dataclass(frozen=True)
class ParsedPrompt:
    examples: tuple[ParsedExample, ...]
    target_states: str
    target_actions: str


def parse_prompt(user_text: str) -> ParsedPrompt:
    target = _TARGET_RE.search(user_text)
    if target is None:
        raise ValueError("prompt has no target history block")
    examples = tuple(ParsedExample(m.group(2), m.group(3), m.group(4))
                     for m in _EXAMPLE_RE.finditer(user_text[:target.start()]))
    return ParsedPrompt(examples, target.group(1), target.group(2))


# -- context selection by the language model ----------------------------------

def selection_prompt(target_text: str, candidate_texts: Sequence[str], c: int) -> str:
    lines = [f"Target system history: {target_text}.", "",
             f"Here are {len(candidate_texts)} related systems. Return only the indices of the "
             f"{c} most similar histories to the target, with no other text. Do not repeat any "
             f"indices. Separate the indices with commas", ""]
    lines += [f"Related system {i} history: {t}" for i, t in enumerate(candidate_texts)]
    lines += ["", f"Indices of the {c} most similar histories:"]
    return "\n".join(lines)
