"""Selection of the knowledge entries relevant to a history."""

from __future__ import annotations

from typing import Sequence

from .core import GENERAL, KnowledgeEntry, Trajectory, VariableSchema


def extract_relevant(knowledge: Sequence[KnowledgeEntry], history: Trajectory,
                     schemas: Sequence[VariableSchema] | None = None) -> list[KnowledgeEntry]:
    """Return general entries, then entries keyed by a variable present in ``history``.

    General entries keep insertion order. Variable entries follow schema
    order when ``schemas`` is given, else the history's own order (states
    before actions). Matching on the key is exact and case-sensitive.
    """
    general = [k for k in knowledge if k.key == GENERAL]
    present = history.variable_names
    if schemas is not None:
        order = [s.name for s in schemas if s.name in set(present)]
        order += [n for n in present if n not in set(order)]
    else:
        order = present
    by_key: dict[str, list[KnowledgeEntry]] = {}
    for k in knowledge:
        if k.key != GENERAL:
            by_key.setdefault(k.key, []).append(k)
    specific = [k for name in order for k in by_key.get(name, [])]
    return general + specific
