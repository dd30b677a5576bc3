"""OpenAI-compatible chat-completions and embeddings client."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from typing import Sequence

import httpx
import numpy as np

from .prompts import PromptBundle

logger = logging.getLogger(__name__)

API_KEY_ENV = "CALM_TWIN_API_KEY"
BASE_URL_ENV = "CALM_TWIN_BASE_URL"
MODEL_ENV = "CALM_TWIN_MODEL"
DEFAULT_MODEL = "gpt-4o"
RETRYABLE = {408, 409, 429, 500, 502, 503, 504}


class TransportError(RuntimeError):
    """The request could not be completed (network, HTTP error, retries exhausted)."""


class RateLimitError(TransportError):
    pass


class EnvelopeError(ValueError):
    """The server answered but the JSON envelope is not a chat completion."""


def request_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class _HttpClient:
    def __init__(self, base_url=None, api_key=None, timeout=60.0, max_retries=5,
                 backoff_base=0.5, backoff_max=30.0, max_in_flight=4, client=None,
                 sleep=time.sleep, seed=None):
        base_url = base_url or os.environ.get(BASE_URL_ENV)
        if not base_url:
            raise ValueError(f"no base URL given and {BASE_URL_ENV} is unset")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.attempts = 0

    def backoff(self, attempt: int, retry_after: str | None = None) -> float:
        delay = min(self.backoff_max, self.backoff_base * 2 ** attempt)
        delay *= 0.5 + self._rng.random()
        if retry_after:
            try:
                delay = max(delay, float(retry_after))
            except ValueError:
                pass
        return min(delay, self.backoff_max)

    def post(self, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/{path.lstrip('/')}"
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff(attempt - 1, retry_after))
            retry_after = None
            self.attempts += 1
            try:
                with self._slots:
                    resp = self._client.post(url, json=payload, headers=headers,
                                             timeout=self.timeout)
            except httpx.HTTPError as exc:
                last = TransportError(f"{url}: {exc}")
                logger.warning("attempt %d failed: %s", attempt + 1, exc)
                continue
            if resp.status_code in RETRYABLE:
                retry_after = resp.headers.get("Retry-After")
                cls = RateLimitError if resp.status_code == 429 else TransportError
                last = cls(f"{url}: HTTP {resp.status_code}")
                logger.warning("attempt %d got HTTP %d", attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except json.JSONDecodeError as exc:
                raise EnvelopeError(f"{url}: response is not JSON") from exc
        raise last


class RemoteChatBackend:
    """Chat-completions backend; ``max_retries`` bounds retries per request.

    When the server returns fewer choices than requested the call is
    repeated until the ensemble is filled.
    """

    def __init__(self, base_url=None, model=None, api_key=None, timeout=60.0, max_retries=5,
                 backoff_base=0.5, backoff_max=30.0, max_in_flight=4, transcript_path=None,
                 client=None, sleep=time.sleep, seed=None):
        self.model = model or os.environ.get(MODEL_ENV, DEFAULT_MODEL)
        self.http = _HttpClient(base_url, api_key, timeout, max_retries, backoff_base,
                                backoff_max, max_in_flight, client, sleep, seed)
        self.transcript_path = transcript_path
        self._transcript_lock = threading.Lock()

    def payload(self, bundle: PromptBundle, n: int) -> dict:
        messages = []
        if bundle.system_text:
            messages.append({"role": "system", "content": bundle.system_text})
        messages.append({"role": "user", "content": bundle.user_text})
        body = {"model": self.model, "messages": messages, "temperature": bundle.temperature,
                "n": n}
        if bundle.max_tokens is not None:
            body["max_tokens"] = bundle.max_tokens
        if bundle.seed is not None:
            body["seed"] = bundle.seed
        return body

    def _record(self, digest: str, texts: Sequence[str]) -> None:
        if not self.transcript_path:
            return
        with self._transcript_lock, open(self.transcript_path, "a", encoding="utf-8") as fh:
            for text in texts:
                fh.write(json.dumps({"request_digest": digest, "response_text": text}) + "\n")

    @staticmethod
    def _choices(envelope) -> list[str]:
        try:
            texts = [c["message"]["content"] for c in envelope["choices"]]
        except (KeyError, TypeError) as exc:
            raise EnvelopeError(f"malformed chat-completions envelope: {exc!r}") from exc
        if not texts or not all(isinstance(t, str) for t in texts):
            raise EnvelopeError("chat-completions envelope has no text choices")
        return texts

    def complete(self, bundle: PromptBundle) -> list[str]:
        want = bundle.samples
        out: list[str] = []
        while len(out) < want:
            payload = self.payload(bundle, want - len(out))
            texts = self._choices(self.http.post("chat/completions", payload))
            self._record(request_digest(payload), texts)
            out.extend(texts)
        return out[:want]


def remote_embed(texts: Sequence[str], base_url=None, model="text-embedding-3-small",
                 api_key=None, client=None, **http_kwargs) -> np.ndarray:
    """Embed ``texts`` through an ``/embeddings`` endpoint; rows are L2-normalized."""
    texts = list(texts)
    if not texts:
        return np.zeros((0, 0))
    http = http_kwargs.pop("http", None) or _HttpClient(base_url, api_key, client=client,
                                                        **http_kwargs)
    envelope = http.post("embeddings", {"model": model, "input": texts})
    try:
        rows = sorted(envelope["data"], key=lambda d: d.get("index", 0))
        vecs = np.array([r["embedding"] for r in rows], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise EnvelopeError(f"malformed embeddings envelope: {exc!r}") from exc
    if vecs.ndim != 2 or len(vecs) != len(texts):
        raise EnvelopeError("embedding batch has inconsistent shape")
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return vecs / norms


class RemoteEmbeddingEncoder:
    """Drop-in for :class:`HashingEncoder` backed by a remote embedding model."""

    def __init__(self, base_url=None, model="text-embedding-3-small", api_key=None, **kwargs):
        self.model = model
        self.http = _HttpClient(base_url, api_key, **kwargs)

    def embed(self, texts):
        if isinstance(texts, str):
            texts = [texts]
        return remote_embed(texts, model=self.model, http=self.http)
