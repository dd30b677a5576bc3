"""Context selection delegated to the language model (ablation mode)."""

from __future__ import annotations

import logging
import re
from typing import Sequence

from .prompts import PromptBundle, selection_prompt

logger = logging.getLogger(__name__)


class LlmSelectionError(ValueError):
    pass


def _parse_indices(reply: str, n: int, c: int) -> list[int]:
    tokens = [t for t in re.split(r"[,\s]+", reply.strip().rstrip(".")) if t]
    try:
        idx = [int(t) for t in tokens]
    except ValueError:
        raise LlmSelectionError(f"non-integer index in reply {reply!r}") from None
    if len(set(idx)) != len(idx):
        raise LlmSelectionError(f"duplicate indices in reply {reply!r}")
    if any(i < 0 or i >= n for i in idx):
        raise LlmSelectionError(f"index out of range in reply {reply!r}")
    if len(idx) != c:
        raise LlmSelectionError(f"expected {c} indices, got {len(idx)}")
    return idx


def llm_select_context(backend, target_text: str, candidate_texts: Sequence[str], c: int,
                       retries: int = 1) -> list[int]:
    """Ask the model for the ``c`` candidates most similar to the target.

    An invalid reply is retried ``retries`` times before giving up.
    """
    n = len(candidate_texts)
    if c <= 0:
        return []
    if c >= n:
        return list(range(n))
    bundle = PromptBundle("", selection_prompt(target_text, candidate_texts, c))
    err = None
    for attempt in range(retries + 1):
        reply = backend.complete(bundle)[0]
        try:
            return _parse_indices(reply, n, c)
        except LlmSelectionError as exc:
            logger.warning("selection attempt %d rejected: %s", attempt + 1, exc)
            err = exc
    raise err
