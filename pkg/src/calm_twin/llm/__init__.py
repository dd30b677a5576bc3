"""Prompt formulation and language-model access."""

from .backends import (BACKENDS, AnalogContextMock, GroundTruthOracle, LlmBackend,
                       LlmSelectorMock, NearestContextMock, ScriptedBackend, make_backend)
from .prompts import (CORRECTIVE_SUFFIX, SYSTEM_PROMPT, PromptBundle, formulate_prompt,
                      parse_prompt, selection_prompt)
from .remote import (EnvelopeError, RateLimitError, RemoteChatBackend, RemoteEmbeddingEncoder,
                     TransportError, remote_embed)
from .selection import LlmSelectionError, llm_select_context

__all__ = [
    "AnalogContextMock", "BACKENDS", "CORRECTIVE_SUFFIX", "EnvelopeError", "GroundTruthOracle",
    "LlmBackend", "LlmSelectionError", "LlmSelectorMock", "NearestContextMock", "PromptBundle",
    "RateLimitError", "RemoteChatBackend", "RemoteEmbeddingEncoder", "SYSTEM_PROMPT",
    "ScriptedBackend", "TransportError", "formulate_prompt", "llm_select_context", "make_backend",
    "parse_prompt", "remote_embed", "selection_prompt",
]
