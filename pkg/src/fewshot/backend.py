"""Scoring-backend contract: logprobs, embeddings, completions, token counts.

The rest of the package talks to the model only through the four-operation
:class:`ScoringBackend` interface.  :class:`MockBackend` is a fully
deterministic in-process implementation used by the test suite and for dry
runs; :class:`HttpBackend` speaks to any OpenAI-compatible completions server
with logprob echo, plus an embeddings endpoint and a tokenize endpoint.
:class:`CachedBackend` adds a transparent append-only disk cache keyed by a
cryptographic hash of (backend_id, operation, inputs).
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import (
    BackendError,
    BackendTransportError,
    CapabilityError,
    DomainError,
    MalformedResponseError,
)


@dataclass(frozen=True)
class LogProbSequence:
    """Per-token natural-log probabilities for (context, continuation).

    The last ``continuation_len`` entries belong to the continuation; any
    earlier entries are echoed context tokens.
    """

    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]
    continuation_len: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "logprobs", tuple(float(x) for x in self.logprobs))
        if len(self.tokens) != len(self.logprobs):
            raise MalformedResponseError(
                f"{len(self.tokens)} tokens but {len(self.logprobs)} logprobs"
            )
        if any(lp > 0.0 for lp in self.logprobs):
            raise MalformedResponseError("logprobs must be <= 0")
        if not 0 <= self.continuation_len <= len(self.tokens):
            raise MalformedResponseError(
                f"continuation_len {self.continuation_len} out of range"
            )

    def continuation_logprobs(self) -> tuple[float, ...]:
        if self.continuation_len == 0:
            return ()
        return self.logprobs[-self.continuation_len :]


@dataclass(frozen=True)
class EmbeddingVector:
    """Fixed-length representation of a prompt, tagged with its provenance."""

    values: tuple[float, ...]
    source_layer: int
    source_token: str
    backend_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(x) for x in self.values))
        if len(self.values) == 0:
            raise MalformedResponseError("embedding must be non-empty")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = ""
    request_timeout: float = 60.0
    max_in_flight: int = 4
    cache_path: Path | None = None
    api_key: str | None = None
    # Hidden-state selection is server-side configuration; these tags record
    # what the serving stack was configured to return.
    embed_layer: int = 16
    embed_token: str = "EOS"
    score_mode: str = "echo"  # or "two_call" for servers with unreliable offsets

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise DomainError("max_in_flight must be >= 1")


class ScoringBackend(Protocol):
    backend_id: str
    max_in_flight: int

    def score(self, context: str, continuation: str) -> LogProbSequence: ...

    def embed(self, text: str) -> EmbeddingVector: ...

    def generate(self, prompt: str, max_new_tokens: int) -> str: ...

    def count_tokens(self, text: str) -> int: ...


def hash_embedding(seed: int, dim: int, text: str) -> np.ndarray:
    """Deterministic pseudo-embedding: same (seed, text) -> same vector."""
    digest = hashlib.sha256(f"{seed}|{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    return rng.standard_normal(dim)


def _hash_unit(seed: int, *parts: str) -> float:
    """Deterministic float in [0, 1) derived from the given strings."""
    digest = hashlib.sha256("|".join((str(seed), *parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / float(1 << 64)


class MockBackend:
    """Deterministic backend for tests and offline dry runs.

    Scoring resolution order: an exact (context, continuation) entry in
    ``score_table``, then the ``score_fn`` hook if it returns a value, then
    hash-derived per-token logprobs.  Completions come from
    ``completion_table`` with an empty-string default.  Token counting is
    whitespace-delimited.  ``fail_marker`` makes any scoring call whose text
    contains the marker raise a transport error (for retry/keep-going tests).
    """

    def __init__(
        self,
        *,
        seed: int = 0,
        embed_dim: int = 32,
        max_in_flight: int = 8,
        latency_per_token: float = 0.0,
        backend_id: str = "mock",
        score_fn: Callable[[str, str], Sequence[float] | None] | None = None,
        fail_marker: str | None = None,
    ):
        if max_in_flight < 1:
            raise DomainError("max_in_flight must be >= 1")
        self.backend_id = backend_id
        self.seed = seed
        self.embed_dim = embed_dim
        self.max_in_flight = max_in_flight
        self.latency_per_token = latency_per_token
        self.score_fn = score_fn
        self.fail_marker = fail_marker
        self.score_table: dict[tuple[str, str], tuple[float, ...]] = {}
        self.completion_table: dict[str, str] = {}
        self.calls: dict[str, int] = {"score": 0, "embed": 0, "generate": 0, "count_tokens": 0}
        self.max_in_flight_seen = 0
        self._in_flight = 0
        self._gate = threading.Semaphore(max_in_flight)
        self._lock = threading.Lock()

    def _begin(self, op: str):
        self._gate.acquire()
        with self._lock:
            self.calls[op] += 1
            self._in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self._in_flight)

    def _end(self):
        with self._lock:
            self._in_flight -= 1
        self._gate.release()

    def _simulate_latency(self, token_count: int):
        if self.latency_per_token > 0:
            time.sleep(self.latency_per_token * token_count)

    def _check_failure(self, *texts: str):
        if self.fail_marker and any(self.fail_marker in t for t in texts):
            raise BackendTransportError(f"wired failure on marker {self.fail_marker!r}")

    def score(self, context: str, continuation: str) -> LogProbSequence:
        if not continuation:
            raise DomainError("continuation must be non-empty")
        self._begin("score")
        try:
            self._check_failure(context, continuation)
            self._simulate_latency(self.count_tokens_local(context) + self.count_tokens_local(continuation))
            logprobs = self.score_table.get((context, continuation))
            if logprobs is None and self.score_fn is not None:
                hook = self.score_fn(context, continuation)
                if hook is not None:
                    logprobs = tuple(float(x) for x in hook)
            if logprobs is None:
                words = continuation.split() or [continuation]
                logprobs = tuple(
                    -3.0 * _hash_unit(self.seed, context, continuation, str(i))
                    for i in range(len(words))
                )
            tokens = continuation.split()
            if len(tokens) != len(logprobs):
                tokens = [f"t{i}" for i in range(len(logprobs))]
            return LogProbSequence(
                tokens=tuple(tokens), logprobs=tuple(logprobs), continuation_len=len(logprobs)
            )
        finally:
            self._end()

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise DomainError("text must be non-empty")
        self._begin("embed")
        try:
            self._check_failure(text)
            values = hash_embedding(self.seed, self.embed_dim, text)
            return EmbeddingVector(
                values=tuple(values),
                source_layer=0,
                source_token="hash",
                backend_id=self.backend_id,
            )
        finally:
            self._end()

    def generate(self, prompt: str, max_new_tokens: int) -> str:
        if not prompt:
            raise DomainError("prompt must be non-empty")
        if max_new_tokens < 1:
            raise DomainError("max_new_tokens must be >= 1")
        self._begin("generate")
        try:
            self._check_failure(prompt)
            self._simulate_latency(self.count_tokens_local(prompt))
            completion = self.completion_table.get(prompt, "")
            words = completion.split()
            if len(words) > max_new_tokens:
                return " ".join(words[:max_new_tokens])
            return completion
        finally:
            self._end()

    @staticmethod
    def count_tokens_local(text: str) -> int:
        return len(text.split())

    def count_tokens(self, text: str) -> int:
        self._begin("count_tokens")
        try:
            return self.count_tokens_local(text)
        finally:
            self._end()


def cache_key(backend_id: str, operation: str, inputs: dict) -> str:
    payload = json.dumps([backend_id, operation, inputs], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CachedBackend:
    """Transparent disk cache around another backend.

    The cache file is append-only line-delimited JSON with records
    ``{"key_hash": ..., "operation": ..., "payload": ...}``.  Hits never reach
    the wrapped backend.  score/embed/generate are cached; count_tokens is
    cheap and always passes through.
    """

    def __init__(self, inner: ScoringBackend, cache_path):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.max_in_flight = inner.max_in_flight
        self._path = Path(cache_path)
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self._path.exists():
            with self._path.open(encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    self._entries[record["key_hash"]] = record["payload"]
        else:
            self._path.parent.mkdir(parents=True, exist_ok=True)

    def _lookup(self, operation: str, inputs: dict, compute: Callable[[], dict]) -> dict:
        key = cache_key(self.backend_id, operation, inputs)
        with self._lock:
            if key in self._entries:
                return self._entries[key]
        payload = compute()
        record = json.dumps(
            {"key_hash": key, "operation": operation, "payload": payload}, sort_keys=True
        )
        with self._lock:
            if key not in self._entries:
                self._entries[key] = payload
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(record + "\n")
        return payload

    def score(self, context: str, continuation: str) -> LogProbSequence:
        if not continuation:
            raise DomainError("continuation must be non-empty")

        def compute() -> dict:
            seq = self.inner.score(context, continuation)
            return {
                "tokens": list(seq.tokens),
                "logprobs": list(seq.logprobs),
                "continuation_len": seq.continuation_len,
            }

        payload = self._lookup(
            "score", {"context": context, "continuation": continuation}, compute
        )
        return LogProbSequence(
            tokens=tuple(payload["tokens"]),
            logprobs=tuple(payload["logprobs"]),
            continuation_len=payload["continuation_len"],
        )

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise DomainError("text must be non-empty")

        def compute() -> dict:
            vec = self.inner.embed(text)
            return {
                "values": list(vec.values),
                "source_layer": vec.source_layer,
                "source_token": vec.source_token,
            }

        payload = self._lookup("embed", {"text": text}, compute)
        return EmbeddingVector(
            values=tuple(payload["values"]),
            source_layer=payload["source_layer"],
            source_token=payload["source_token"],
            backend_id=self.backend_id,
        )

    def generate(self, prompt: str, max_new_tokens: int) -> str:
        payload = self._lookup(
            "generate",
            {"prompt": prompt, "max_new_tokens": max_new_tokens},
            lambda: {"text": self.inner.generate(prompt, max_new_tokens)},
        )
        return payload["text"]

    def count_tokens(self, text: str) -> int:
        return self.inner.count_tokens(text)


class HttpBackend:
    """Client for an OpenAI-compatible server with logprob echo.

    Scoring sends one completions request with ``echo`` and ``max_tokens=0``
    and extracts the continuation's logprobs via text offsets; the
    ``two_call`` mode instead scores the bare context first and uses its token
    count as the boundary (for servers whose offsets are unreliable).  The
    first token of a sequence has no conditional probability and servers
    report it as null; such entries are skipped, which only matters when the
    context is empty.

    Embeddings come from the server's embeddings endpoint; which hidden layer
    and token position it returns is serving-stack configuration and is
    recorded in the vector's ``source_layer``/``source_token`` tags from
    :class:`BackendConfig`.
    """

    RETRIES = 3

    def __init__(self, config: BackendConfig):
        import requests

        self.config = config
        self.backend_id = f"http:{config.model_name}@{config.base_url}"
        self.max_in_flight = config.max_in_flight
        self._session = requests.Session()
        if config.api_key:
            self._session.headers["Authorization"] = f"Bearer {config.api_key}"
        self._gate = threading.Semaphore(config.max_in_flight)

    def _post(self, path: str, body: dict) -> dict:
        import requests

        url = self.config.base_url.rstrip("/") + path
        last_exc: Exception | None = None
        with self._gate:
            for attempt in range(self.RETRIES):
                try:
                    resp = self._session.post(
                        url, json=body, timeout=self.config.request_timeout
                    )
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last_exc = exc
                    time.sleep(0.2 * (2**attempt))
                    continue
                if resp.status_code == 404:
                    raise CapabilityError(f"server exposes no endpoint at {url}")
                if resp.status_code >= 500:
                    last_exc = BackendTransportError(
                        f"{url} returned {resp.status_code}: {resp.text[:200]}"
                    )
                    time.sleep(0.2 * (2**attempt))
                    continue
                if resp.status_code >= 400:
                    raise BackendError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
                try:
                    return resp.json()
                except ValueError as exc:
                    raise MalformedResponseError(f"{url} returned non-JSON body") from exc
        raise BackendTransportError(f"request to {url} failed after {self.RETRIES} attempts: {last_exc}")

    def _echo_logprobs(self, prompt: str) -> tuple[list[str], list, list[int]]:
        data = self._post(
            "/completions",
            {
                "model": self.config.model_name,
                "prompt": prompt,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
                "temperature": 0,
            },
        )
        try:
            lp = data["choices"][0]["logprobs"]
            return lp["tokens"], lp["token_logprobs"], lp.get("text_offset") or []
        except (KeyError, IndexError, TypeError) as exc:
            raise CapabilityError("server did not return echoed logprobs") from exc

    def score(self, context: str, continuation: str) -> LogProbSequence:
        if not continuation:
            raise DomainError("continuation must be non-empty")
        tokens, logprobs, offsets = self._echo_logprobs(context + continuation)
        if self.config.score_mode == "two_call" or len(offsets) != len(tokens):
            # boundary = longest common token prefix with the bare context;
            # robust when the tokenizer merges whitespace across the seam
            boundary = 0
            if context:
                ctx_tokens, _, _ = self._echo_logprobs(context)
                while (
                    boundary < min(len(ctx_tokens), len(tokens))
                    and ctx_tokens[boundary] == tokens[boundary]
                ):
                    boundary += 1
        else:
            # a token belongs to the continuation if its span extends past the context
            boundary = next(
                (
                    i
                    for i, (off, tok) in enumerate(zip(offsets, tokens))
                    if off + len(tok) > len(context)
                ),
                len(tokens),
            )
        cont_tokens: list[str] = []
        cont_logprobs: list[float] = []
        for tok, lp in zip(tokens[boundary:], logprobs[boundary:]):
            if lp is None:
                continue  # unconditioned first token of the whole sequence
            cont_tokens.append(tok)
            cont_logprobs.append(float(lp))
        if not cont_logprobs:
            raise MalformedResponseError("no scored continuation tokens in echo response")
        return LogProbSequence(
            tokens=tuple(cont_tokens),
            logprobs=tuple(cont_logprobs),
            continuation_len=len(cont_logprobs),
        )

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise DomainError("text must be non-empty")
        data = self._post(
            "/embeddings", {"model": self.config.model_name, "input": [text]}
        )
        try:
            values = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("embeddings response missing data[0].embedding") from exc
        return EmbeddingVector(
            values=tuple(float(x) for x in values),
            source_layer=self.config.embed_layer,
            source_token=self.config.embed_token,
            backend_id=self.backend_id,
        )

    def generate(self, prompt: str, max_new_tokens: int) -> str:
        if not prompt:
            raise DomainError("prompt must be non-empty")
        if max_new_tokens < 1:
            raise DomainError("max_new_tokens must be >= 1")
        data = self._post(
            "/completions",
            {
                "model": self.config.model_name,
                "prompt": prompt,
                "max_tokens": max_new_tokens,
                "temperature": 0,
            },
        )
        try:
            return data["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("completions response missing choices[0].text") from exc

    def count_tokens(self, text: str) -> int:
        if not text:
            return 0
        data = self._post("/tokenize", {"model": self.config.model_name, "prompt": text})
        if isinstance(data.get("count"), int):
            return data["count"]
        if isinstance(data.get("tokens"), list):
            return len(data["tokens"])
        raise MalformedResponseError("tokenize response has neither 'count' nor 'tokens'")


def open_backend(kind: str, config: BackendConfig, **mock_kwargs) -> ScoringBackend:
    """Construct a backend by name ('mock' or 'http'), wrapping in a cache if configured."""
    if kind == "mock":
        backend: ScoringBackend = MockBackend(
            max_in_flight=config.max_in_flight, **mock_kwargs
        )
    elif kind == "http":
        backend = HttpBackend(config)
    else:
        raise DomainError(f"unknown backend kind {kind!r}")
    if config.cache_path is not None:
        backend = CachedBackend(backend, config.cache_path)
    return backend


def parallel_map(fn: Callable, items: Sequence, max_workers: int) -> list:
    """Order-preserving map, optionally fanned out over a bounded thread pool."""
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(max_workers, len(items))) as pool:
        return list(pool.map(fn, items))
