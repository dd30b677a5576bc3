import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from calm_twin.codec import decode_states
from calm_twin.llm import PromptBundle
from calm_twin.llm.remote import (API_KEY_ENV, EnvelopeError, RateLimitError, RemoteChatBackend,
                                  TransportError, remote_embed, request_digest)


class FixtureServer:
    """Local HTTP server answering from a queue of (status, headers, body) tuples."""

    def __init__(self):
        self.queue, self.requests = [], []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append((self.path, dict(self.headers), body))
                status, headers, payload = outer.queue.pop(0) if outer.queue else (500, {}, {})
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                for k, v in headers.items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


def chat(*texts):
    return {"choices": [{"index": i, "message": {"role": "assistant", "content": t}}
                        for i, t in enumerate(texts)]}


@pytest.fixture
def server():
    s = FixtureServer()
    yield s
    s.close()


@pytest.fixture
def sleeps():
    return []


def backend(server, sleeps, **kw):
    return RemoteChatBackend(server.url, model="m", api_key="k", sleep=sleeps.append, seed=0,
                             timeout=5, **kw)


def test_payload_and_auth(server, sleeps):
    server.queue.append((200, {}, chat("Time 1: x: 2")))
    out = backend(server, sleeps).complete(PromptBundle("sys", "user", max_tokens=50))
    assert out == ["Time 1: x: 2"]
    path, headers, body = server.requests[0]
    assert path == "/v1/chat/completions"
    assert headers["Authorization"] == "Bearer k"
    assert body == {"model": "m", "temperature": 0.0, "n": 1, "max_tokens": 50,
                    "messages": [{"role": "system", "content": "sys"},
                                 {"role": "user", "content": "user"}]}


def test_api_key_from_environment(server, sleeps, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "from-env")
    server.queue.append((200, {}, chat("ok")))
    RemoteChatBackend(server.url, sleep=sleeps.append).complete(PromptBundle("", "u"))
    assert server.requests[0][1]["Authorization"] == "Bearer from-env"


def test_retries_capped_at_five(server, sleeps):
    server.queue.extend([(429, {}, {})] * 10)
    be = backend(server, sleeps)
    with pytest.raises(RateLimitError):
        be.complete(PromptBundle("", "u"))
    assert len(server.requests) == 6 and len(sleeps) == 5
    # jittered exponential backoff: each nominal delay doubles
    for i, d in enumerate(sleeps):
        nominal = 0.5 * 2 ** i
        assert 0.5 * nominal <= d <= 1.5 * nominal


def test_retry_after_and_recovery(server, sleeps):
    server.queue.extend([(503, {"Retry-After": "7"}, {}), (200, {}, chat("fine"))])
    assert backend(server, sleeps).complete(PromptBundle("", "u")) == ["fine"]
    assert sleeps == [7.0]


def test_client_error_not_retried(server, sleeps):
    server.queue.append((400, {}, {"error": "bad"}))
    with pytest.raises(TransportError):
        backend(server, sleeps).complete(PromptBundle("", "u"))
    assert len(server.requests) == 1


def test_malformed_envelopes(server, sleeps):
    server.queue.extend([(200, {}, {"nope": 1}), (200, {}, b"not json"), (200, {}, {"choices": []})])
    be = backend(server, sleeps)
    for _ in range(3):
        with pytest.raises(EnvelopeError):
            be.complete(PromptBundle("", "u"))


def test_unreachable_server(sleeps):
    be = RemoteChatBackend("http://127.0.0.1:9", sleep=sleeps.append, max_retries=2, timeout=1)
    with pytest.raises(TransportError):
        be.complete(PromptBundle("", "u"))
    assert len(sleeps) == 2


def test_samples_filled_by_repeated_calls(server, sleeps):
    server.queue.extend([(200, {}, chat("a", "b")), (200, {}, chat("c"))])
    out = backend(server, sleeps).complete(PromptBundle("", "u", temperature=1.0, n_samples=3,
                                                        decoding="sample"))
    assert out == ["a", "b", "c"]
    assert [r[2]["n"] for r in server.requests] == [3, 1]


def test_transcript_and_markdown_noise(server, sleeps, tmp_path):
    noisy = "Sure! Here it is:\n**Time 3:** `x: 4.5`, y: -2\n"
    server.queue.append((200, {}, chat(noisy)))
    path = tmp_path / "t.jsonl"
    be = backend(server, sleeps, transcript_path=path)
    reply = be.complete(PromptBundle("", "u"))[0]
    steps, diag = decode_states(reply, ["x", "y"], expected_steps=1)
    assert steps[0].time == 3 and steps[0].state == {"x": 4.5, "y": -2.0}
    record = json.loads(path.read_text())
    assert record == {"request_digest": request_digest(server.requests[0][2]),
                      "response_text": noisy}


def test_embeddings_normalized(server):
    server.queue.append((200, {}, {"data": [{"index": 1, "embedding": [0, 3, 4]},
                                            {"index": 0, "embedding": [2, 0, 0]}]}))
    out = remote_embed(["a", "b"], base_url=server.url, api_key="")
    assert np.allclose(out, [[1, 0, 0], [0, 0.6, 0.8]])
    assert server.requests[0][0] == "/v1/embeddings"
    assert remote_embed([], base_url=server.url).shape[0] == 0


def test_embeddings_inconsistent_batch(server):
    server.queue.append((200, {}, {"data": [{"index": 0, "embedding": [1, 0]},
                                            {"index": 1, "embedding": [1]}]}))
    with pytest.raises(EnvelopeError):
        remote_embed(["a", "b"], base_url=server.url)


def test_missing_base_url(monkeypatch):
    monkeypatch.delenv("CALM_TWIN_BASE_URL", raising=False)
    with pytest.raises(ValueError):
        RemoteChatBackend()
