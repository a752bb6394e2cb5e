"""In-process mock of the model endpoint wire shape for tests.

Serves /chat/completions, /embeddings, and /completions (echo+logprobs)
with pluggable reply functions, per-request failure scripting, and
concurrency instrumentation.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable


def hash_embedding(text: str, dim: int = 16) -> list[float]:
    """Deterministic bag-of-tokens embedding, unit norm."""
    vec = [0.0] * dim
    for token in text.split():
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        idx = digest[0] % dim
        sign = 1.0 if digest[1] % 2 == 0 else -1.0
        vec[idx] += sign
    norm = math.sqrt(sum(x * x for x in vec))
    if norm == 0:
        vec[0] = 1.0
        norm = 1.0
    return [x / norm for x in vec]


def uniform_logprobs(prompt: str, full_text: str) -> tuple[list[str], list[float], list[int]]:
    """Whitespace tokens over full_text, ln(0.5) each, with char offsets."""
    tokens, offsets = [], []
    pos = 0
    for token in full_text.split():
        start = full_text.index(token, pos)
        tokens.append(token)
        offsets.append(start)
        pos = start + len(token)
    return tokens, [math.log(0.5)] * len(tokens), offsets


class MockModelServer:
    def __init__(
        self,
        reply_fn: Callable[[str], str] | None = None,
        embed_fn: Callable[[str], list[float]] = hash_embedding,
        logprob_fn=uniform_logprobs,
    ):
        self.reply_fn = reply_fn or (lambda prompt: "PASS")
        self.embed_fn = embed_fn
        self.logprob_fn = logprob_fn
        self.logprobs_supported = True
        self.reply_delay = 0.0
        self.request_count = 0
        self.fail_script: list[int] = []  # HTTP statuses to emit before succeeding
        self.status_fn: Callable[[dict], int | None] | None = None  # per-body override
        self._concurrent = 0
        self.max_concurrent = 0
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # silence
                pass

            def do_POST(self):
                with outer._lock:
                    outer.request_count += 1
                    outer._concurrent += 1
                    outer.max_concurrent = max(outer.max_concurrent, outer._concurrent)
                    forced_status = outer.fail_script.pop(0) if outer.fail_script else None
                try:
                    if forced_status is not None:
                        self.send_response(forced_status)
                        self.end_headers()
                        self.wfile.write(b"scripted failure")
                        return
                    if outer.reply_delay:
                        import time

                        time.sleep(outer.reply_delay)
                    length = int(self.headers["Content-Length"])
                    body = json.loads(self.rfile.read(length))
                    if outer.status_fn is not None:
                        forced = outer.status_fn(body)
                        if forced is not None:
                            self.send_response(forced)
                            self.end_headers()
                            self.wfile.write(b"scripted failure")
                            return
                    if self.path.endswith("/chat/completions"):
                        payload = outer._chat(body)
                    elif self.path.endswith("/embeddings"):
                        payload = outer._embeddings(body)
                    elif self.path.endswith("/completions"):
                        payload = outer._completions(body)
                    else:
                        self.send_response(404)
                        self.end_headers()
                        return
                    blob = json.dumps(payload).encode("utf-8")
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(blob)))
                    self.end_headers()
                    self.wfile.write(blob)
                finally:
                    with outer._lock:
                        outer._concurrent -= 1

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def _chat(self, body: dict) -> dict:
        prompt = body["messages"][0]["content"]
        return {"choices": [{"message": {"content": self.reply_fn(prompt)}}]}

    def _embeddings(self, body: dict) -> dict:
        texts = body["input"]
        return {
            "data": [
                {"index": i, "embedding": self.embed_fn(text)}
                for i, text in enumerate(texts)
            ]
        }

    def _completions(self, body: dict) -> dict:
        full_text = body["prompt"]
        if not self.logprobs_supported:
            return {"choices": [{"text": full_text}]}
        tokens, logprobs, offsets = self.logprob_fn("", full_text)
        return {
            "choices": [
                {
                    "text": full_text,
                    "logprobs": {
                        "tokens": tokens,
                        "token_logprobs": logprobs,
                        "text_offset": offsets,
                    },
                }
            ]
        }

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def start(self) -> "MockModelServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
