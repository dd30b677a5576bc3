"""Trajectory <-> text mapping used inside prompts.

Grammar (see FORMAT.md)::

    Time 0: x: 1, y: 1 | Time 1: x: 2, y: 1

The decoder is tolerant of the Markdown noise language models tend to add:
``*``, backticks and non-numeric ``-`` are stripped and lines that do not
start with ``Time`` are dropped before parsing.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .core import STATE, TimeStep, Trajectory, VariableSchema

STEP_SEP = " | "
VAR_SEP = ", "
NO_ACTION = "none"

_TIME_RE = re.compile(r"^Time\s+([^:]+?)\s*:\s*(.*)$", re.S)
_SEGMENT_RE = re.compile(r"[^|\n]+")
_MARKUP_RE = re.compile(r"[*`]|-(?!\d)")


class CodecError(ValueError):
    """Base class for decode failures; each one should trigger a regeneration."""


class MissingVariable(CodecError):
    def __init__(self, name: str, step: int):
        super().__init__(f"variable {name!r} missing at step {step}")
        self.name = name
        self.step = step


class WrongStepCount(CodecError):
    def __init__(self, got: int, want: int):
        super().__init__(f"expected {want} step(s), got {got}")
        self.got = got
        self.want = want


class NumberParse(CodecError):
    def __init__(self, position: int, token: str):
        super().__init__(f"cannot parse number {token!r} at position {position}")
        self.position = position
        self.token = token


@dataclass
class ParseDiagnostics:
    stripped_characters: int = 0
    recovered_lines: int = 0
    position_of_first_error: int | None = None


def format_value(value: float, decimals: int = 0) -> str:
    text = f"{float(value):.{decimals}f}"
    if text.startswith("-") and float(text) == 0.0:
        text = text[1:]
    return text


def format_time(time) -> str:
    if isinstance(time, float) and time.is_integer():
        time = int(time)
    return str(time) if isinstance(time, int) else repr(float(time))


def _plain(value: float) -> str:
    # fallback for variables without a schema: integers without a point
    if float(value).is_integer():
        return format_value(value, 0)
    return repr(float(value))


def _schema_index(schemas) -> dict[str, VariableSchema]:
    if schemas is None:
        return {}
    if isinstance(schemas, Mapping):
        return dict(schemas)
    return {s.name: s for s in schemas}


def _ordered(names: Iterable[str], smap: Mapping[str, VariableSchema]) -> list[str]:
    names = list(names)
    order = {n: i for i, n in enumerate(smap)}
    known = sorted((n for n in names if n in order), key=order.__getitem__)
    return known + [n for n in names if n not in order]


def _render(name: str, value: float, smap) -> str:
    schema = smap.get(name)
    return f"{name}: {format_value(value, schema.decimals) if schema else _plain(value)}"


def encode_states(traj: Trajectory, schemas=None) -> str:
    """Render the state part of ``traj``; variables follow schema order."""
    smap = _schema_index(schemas)
    names = _ordered(traj.state_names, smap)
    parts = []
    for step in traj.steps:
        body = VAR_SEP.join(_render(n, step.state[n], smap) for n in names)
        parts.append(f"Time {format_time(step.time)}: {body}")
    return STEP_SEP.join(parts)


def encode_actions(traj: Trajectory, schemas=None) -> str:
    """Render the action part of ``traj``.

    Schemas flagged ``render_as_flag`` print the bare variable name when the
    value is non-zero and nothing otherwise; a step with nothing to print is
    rendered as ``none``.
    """
    smap = _schema_index(schemas)
    names = _ordered(traj.action_names, smap)
    if not names:
        return ""
    parts = []
    for step in traj.steps:
        items = []
        for n in names:
            schema = smap.get(n)
            if schema is not None and schema.render_as_flag:
                if step.action[n] != 0:
                    items.append(n)
            else:
                items.append(_render(n, step.action[n], smap))
        parts.append(f"Time {format_time(step.time)}: {VAR_SEP.join(items) or NO_ACTION}")
    return STEP_SEP.join(parts)


def clean_text(text: str) -> tuple[str, ParseDiagnostics]:
    """Strip Markdown noise and drop lines that do not start with ``Time``."""
    diag = ParseDiagnostics()
    kept = []
    for line in text.splitlines():
        cleaned, n = _MARKUP_RE.subn("", line)
        cleaned = cleaned.strip()
        if not cleaned.startswith("Time"):
            diag.stripped_characters += len(line.strip())
            continue
        diag.stripped_characters += n
        if n:
            diag.recovered_lines += 1
        kept.append(cleaned)
    return "\n".join(kept), diag


def _parse_number(token: str, position: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise NumberParse(position, token) from None
    if not math.isfinite(value):
        raise NumberParse(position, token)
    return value


def _parse_time(token: str, position: int):
    value = _parse_number(token.strip(), position)
    return int(value) if value.is_integer() else value


def parse_steps(text: str, tolerant: bool = True) -> tuple[list[tuple], ParseDiagnostics]:
    """Parse text into ``[(time, {name: value})]`` without schema checks."""
    if tolerant:
        text, diag = clean_text(text)
    else:
        diag = ParseDiagnostics()
    steps = []
    try:
        for seg in _SEGMENT_RE.finditer(text):
            raw = seg.group(0)
            if not raw.strip():
                continue
            lead = len(raw) - len(raw.lstrip())
            body = raw.strip()
            base = seg.start() + lead
            m = _TIME_RE.match(body)
            if m is None:
                raise NumberParse(base, body)
            time = _parse_time(m.group(1), base + m.start(1))
            values = {}
            offset = base + m.start(2)
            for item in m.group(2).split(","):
                if item.strip():
                    name, sep, token = item.rpartition(":")
                    if not sep or not name.strip():
                        raise NumberParse(offset, item.strip())
                    pos = offset + len(name) + 1 + (len(token) - len(token.lstrip()))
                    values[name.strip()] = _parse_number(token.strip(), pos)
                offset += len(item) + 1
            steps.append((time, values))
    except NumberParse as exc:
        diag.position_of_first_error = exc.position
        raise
    return steps, diag


def decode_states(text: str, schemas: Sequence, expected_steps: int | None = None,
                  tolerant: bool = True) -> tuple[list[TimeStep], ParseDiagnostics]:
    """Inverse of :func:`encode_states`.

    ``schemas`` lists the state variables that must be present (schemas or
    plain names; action schemas are ignored). Extra variables in the text
    are dropped.
    """
    names = [s if isinstance(s, str) else s.name for s in schemas
             if isinstance(s, str) or s.kind == STATE]
    parsed, diag = parse_steps(text, tolerant=tolerant)
    if expected_steps is not None and len(parsed) != expected_steps:
        raise WrongStepCount(len(parsed), expected_steps)
    out = []
    for i, (time, values) in enumerate(parsed):
        for n in names:
            if n not in values:
                raise MissingVariable(n, i)
        out.append(TimeStep(time, {n: values[n] for n in names}, {}))
    return out, diag
