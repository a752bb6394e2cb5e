"""HTTP client for chat, embedding, and logprob endpoints.

One gateway instance is shared by every model-dependent stage. It gives
them batching helpers, bounded concurrent fan-out, retries with backoff,
and a write-through response cache keyed by (model, prompt, decoding
params), so a warm-cache run is bit-reproducible with the network
disabled.

The wire dialect is the de-facto chat-completions HTTP shape; everything
dialect-specific is confined to the ``_*_payload`` / ``_parse_*`` helpers
so an alternate dialect can be plugged in at one seam.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "HOW2_API_KEY"


class GatewayError(Exception):
    """Transport or HTTP failure that survived the retry policy."""


class ProtocolError(GatewayError):
    """The endpoint answered, but the body is not in the expected shape."""


class CapabilityError(GatewayError):
    """The endpoint lacks a required capability (e.g. echoed logprobs)."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_ms: int = 50

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str
    model_name: str
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    cache_dir: str | None = None
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    max_tokens: int = 1024
    seed: int | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class TokenLogprob:
    token: str
    logprob: float


@dataclass(frozen=True)
class ChatExchange:
    request_hash: str
    prompt: str
    response_text: str
    token_logprobs: tuple[TokenLogprob, ...] | None = None


def _canonical_hash(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed JSON files under one directory."""

    def __init__(self, cache_dir: str | Path):
        self._dir = Path(cache_dir)
        self._dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self._dir / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text("utf-8"))

    def put(self, key: str, payload: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True), "utf-8")
        tmp.replace(path)


class Gateway:
    """Thread-safe client with bounded fan-out and single-flight misses."""

    def __init__(self, config: GatewayConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._cache = ResponseCache(config.cache_dir) if config.cache_dir else None
        self._semaphore = threading.BoundedSemaphore(config.max_in_flight)
        self._inflight_locks: dict[str, threading.Lock] = {}
        self._inflight_guard = threading.Lock()
        self._client = httpx.Client(
            base_url=config.endpoint_url, timeout=60.0, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    # -- public operations -------------------------------------------------

    def complete(self, prompt: str, **overrides) -> ChatExchange:
        """One chat completion; identical (prompt, params) replays from cache."""
        params = self._decoding_params(overrides)
        key = _canonical_hash(
            {"kind": "chat", "model": self.config.model_name, "prompt": prompt, **params}
        )
        payload = self._cached_call(key, lambda: self._chat_request(prompt, params))
        return ChatExchange(
            request_hash=key,
            prompt=prompt,
            response_text=payload["response_text"],
            token_logprobs=None,
        )

    def complete_many(self, prompts: Sequence[str], **overrides) -> list[ChatExchange]:
        if not prompts:
            return []
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(lambda p: self.complete(p, **overrides), prompts))

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        """Unit-norm embeddings, one per input text, equal dimension."""
        if not texts:
            raise ValueError("texts must be non-empty")
        key = _canonical_hash(
            {"kind": "embed", "model": self.config.model_name, "texts": list(texts)}
        )
        payload = self._cached_call(key, lambda: self._embed_request(texts))
        return [list(vec) for vec in payload["vectors"]]

    def score_continuation(self, prompt: str, continuation: str) -> list[TokenLogprob]:
        """Teacher-forced logprobs covering exactly the continuation tokens."""
        if continuation == "":
            return []
        key = _canonical_hash(
            {
                "kind": "logprob",
                "model": self.config.model_name,
                "prompt": prompt,
                "continuation": continuation,
            }
        )
        payload = self._cached_call(key, lambda: self._logprob_request(prompt, continuation))
        return [TokenLogprob(token=t, logprob=lp) for t, lp in payload["token_logprobs"]]

    # -- request plumbing --------------------------------------------------

    def _decoding_params(self, overrides: dict) -> dict:
        params = {
            "temperature": self.config.temperature,
            "stop": list(self.config.stop_sequences),
            "max_tokens": self.config.max_tokens,
            "seed": self.config.seed,
        }
        for name, value in overrides.items():
            if name not in params:
                raise TypeError(f"unknown decoding override {name!r}")
            params[name] = list(value) if name == "stop" else value
        return params

    def _cached_call(self, key: str, fetch: Callable[[], dict]) -> dict:
        if self._cache is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        lock = self._key_lock(key)
        with lock:
            if self._cache is not None:
                hit = self._cache.get(key)
                if hit is not None:
                    return hit
            payload = fetch()
            if self._cache is not None:
                self._cache.put(key, payload)
            return payload

    def _key_lock(self, key: str) -> threading.Lock:
        with self._inflight_guard:
            lock = self._inflight_locks.get(key)
            if lock is None:
                lock = threading.Lock()
                self._inflight_locks[key] = lock
            return lock

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        policy = self.config.retry
        last_error: Exception | None = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                with self._semaphore:
                    response = self._client.post(path, json=body, headers=self._headers())
            except httpx.HTTPError as exc:
                last_error = exc
                logger.warning("attempt %d/%d failed: %s", attempt, policy.max_attempts, exc)
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except json.JSONDecodeError as exc:
                        raise ProtocolError(f"non-JSON body from {path}: {exc}") from exc
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = GatewayError(f"HTTP {response.status_code} from {path}")
                    logger.warning(
                        "attempt %d/%d: HTTP %d", attempt, policy.max_attempts,
                        response.status_code,
                    )
                else:
                    raise GatewayError(
                        f"HTTP {response.status_code} from {path}: {response.text[:200]}"
                    )
            if attempt < policy.max_attempts:
                time.sleep(policy.backoff_base_ms / 1000.0 * (2 ** (attempt - 1)))
        raise GatewayError(
            f"request to {path} failed after {policy.max_attempts} attempts: {last_error}"
        )

    def _chat_request(self, prompt: str, params: dict) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params["temperature"],
            "max_tokens": params["max_tokens"],
        }
        if params["stop"]:
            body["stop"] = params["stop"]
        if params["seed"] is not None:
            body["seed"] = params["seed"]
        data = self._post("/chat/completions", body)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected chat completion shape: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("chat completion content is not text")
        return {"response_text": text}

    def _embed_request(self, texts: Sequence[str]) -> dict:
        data = self._post("/embeddings", {"model": self.config.model_name, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda row: row["index"])
            vectors = [row["embedding"] for row in rows]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"unexpected embeddings shape: {exc}") from exc
        if len(vectors) != len(texts):
            raise ProtocolError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        dims = {len(vec) for vec in vectors}
        if len(dims) != 1:
            raise ProtocolError(f"dimension mismatch across batch: {sorted(dims)}")
        return {"vectors": [_unit_norm(vec) for vec in vectors]}

    def _logprob_request(self, prompt: str, continuation: str) -> dict:
        body = {
            "model": self.config.model_name,
            "prompt": prompt + continuation,
            "echo": True,
            "logprobs": 0,
            "max_tokens": 0,
            "temperature": 0,
        }
        data = self._post("/completions", body)
        try:
            choice = data["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected completion shape: {exc}") from exc
        logprobs = choice.get("logprobs")
        if not logprobs or "tokens" not in logprobs:
            raise CapabilityError(
                f"endpoint {self.config.endpoint_url} does not support echoed logprobs"
            )
        tokens = logprobs["tokens"]
        values = logprobs["token_logprobs"]
        offsets = logprobs["text_offset"]
        if not (len(tokens) == len(values) == len(offsets)):
            raise ProtocolError("logprob arrays have mismatched lengths")
        boundary = len(prompt)
        pairs = [
            (token, value)
            for token, value, offset in zip(tokens, values, offsets)
            if offset >= boundary
        ]
        if not pairs:
            raise ProtocolError("no logprobs cover the continuation")
        return {"token_logprobs": pairs}


def _unit_norm(vec: Sequence[float]) -> list[float]:
    norm = math.sqrt(sum(x * x for x in vec))
    if norm == 0:
        raise ProtocolError("zero-norm embedding cannot be normalized")
    return [x / norm for x in vec]


def load_gateway_config(path: str | Path, **overrides) -> GatewayConfig:
    """Read a gateway TOML file; keyword overrides win over file values."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    raw = tomllib.loads(Path(path).read_text("utf-8"))
    section = raw.get("gateway", raw)
    retry_raw = section.pop("retry", {})
    known = {f for f in GatewayConfig.__dataclass_fields__}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown gateway config keys: {sorted(unknown)}")
    if "stop_sequences" in section:
        section["stop_sequences"] = tuple(section["stop_sequences"])
    config = GatewayConfig(retry=RetryPolicy(**retry_raw), **section)
    if overrides:
        config = replace(config, **overrides)
    return config
