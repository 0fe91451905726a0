import json
import math
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from fewshot.backend import (
    BackendConfig,
    CachedBackend,
    EmbeddingVector,
    HttpBackend,
    LogProbSequence,
    MockBackend,
    parallel_map,
)
from fewshot.errors import (
    BackendError,
    BackendTransportError,
    CapabilityError,
    DomainError,
    MalformedResponseError,
)


class TestLogProbSequence:
    def test_positive_logprob_rejected_as_malformed(self):
        with pytest.raises(MalformedResponseError):
            LogProbSequence(tokens=("a",), logprobs=(0.5,), continuation_len=1)

    def test_length_mismatch_rejected(self):
        with pytest.raises(MalformedResponseError):
            LogProbSequence(tokens=("a", "b"), logprobs=(-1.0,), continuation_len=1)

    def test_continuation_len_bounds(self):
        with pytest.raises(MalformedResponseError):
            LogProbSequence(tokens=("a",), logprobs=(-1.0,), continuation_len=2)

    def test_continuation_suffix(self):
        seq = LogProbSequence(tokens=("c", "a"), logprobs=(-1.0, -2.0), continuation_len=1)
        assert seq.continuation_logprobs() == (-2.0,)


class TestEmbeddingVector:
    def test_empty_rejected(self):
        with pytest.raises(MalformedResponseError):
            EmbeddingVector(values=(), source_layer=0, source_token="x", backend_id="b")


class TestMockScore:
    def test_deterministic(self):
        backend = MockBackend(seed=4)
        a = backend.score("ctx", "some continuation text")
        b = backend.score("ctx", "some continuation text")
        assert a == b

    def test_prescribed_table(self):
        backend = MockBackend()
        backend.score_table[("ctx", "a")] = (math.log(0.5),)
        seq = backend.score("ctx", "a")
        assert seq.logprobs == (math.log(0.5),)
        assert seq.logprobs[0] == pytest.approx(-0.6931471805599453)

    def test_empty_continuation_rejected(self):
        with pytest.raises(DomainError):
            MockBackend().score("ctx", "")

    def test_score_fn_hook(self):
        backend = MockBackend(score_fn=lambda c, k: [-1.0, -2.0] if k == "hook me" else None)
        assert backend.score("", "hook me").logprobs == (-1.0, -2.0)
        assert len(backend.score("", "one two").logprobs) == 2  # falls back to hash

    def test_fail_marker(self):
        backend = MockBackend(fail_marker="BOOM")
        with pytest.raises(BackendTransportError):
            backend.score("ctx BOOM", "x")


class TestMockEmbed:
    def test_deterministic(self):
        backend = MockBackend(seed=1)
        assert backend.embed("hello") == backend.embed("hello")

    def test_distinct_texts_distinct_vectors(self):
        backend = MockBackend(seed=2)
        rng = random.Random(0)
        texts = {f"text {rng.randrange(10**9)}-{i}" for i in range(200)}
        vectors = {backend.embed(t).values for t in sorted(texts)}
        assert len(vectors) == len(texts)

    def test_empty_text_rejected(self):
        with pytest.raises(DomainError):
            MockBackend().embed("")

    def test_fixed_dimension(self):
        backend = MockBackend(embed_dim=16)
        assert len(backend.embed("a").values) == 16
        assert len(backend.embed("something longer").values) == 16


class TestMockGenerate:
    def test_canned_completion(self):
        backend = MockBackend()
        backend.completion_table["p"] = "def inc(x):\n    return x + 1"
        assert backend.generate("p", 64) == "def inc(x):\n    return x + 1"

    def test_cap_respected(self):
        backend = MockBackend()
        backend.completion_table["p"] = "one two three"
        assert backend.generate("p", 1) == "one"

    def test_unknown_prompt_empty(self):
        assert MockBackend().generate("mystery", 8) == ""


class TestMockCountTokens:
    def test_empty(self):
        assert MockBackend().count_tokens("") == 0

    def test_whitespace_rule(self):
        assert MockBackend().count_tokens("a b c") == 3

    def test_concatenation_property(self):
        backend = MockBackend()
        rng = random.Random(5)
        alphabet = "ab c  d\n e"
        for _ in range(300):
            a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 8)))
            b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 8)))
            assert (
                backend.count_tokens(a) + backend.count_tokens(b)
                >= backend.count_tokens(a + " " + b) - 1
            )


class TestBoundedConcurrency:
    def test_in_flight_never_exceeds_bound(self):
        backend = MockBackend(max_in_flight=4, latency_per_token=0.002)
        with ThreadPoolExecutor(max_workers=32) as pool:
            futures = [
                pool.submit(backend.score, "ctx", f"word{i} tail") for i in range(64)
            ]
            for f in futures:
                f.result()
        assert backend.max_in_flight_seen <= 4
        assert backend.calls["score"] == 64

    def test_parallel_map_preserves_order(self):
        out = parallel_map(lambda x: x * 2, list(range(20)), max_workers=4)
        assert out == [x * 2 for x in range(20)]


class TestCache:
    def test_cache_transparency_and_no_second_request(self, tmp_path):
        inner = MockBackend(seed=9)
        uncached = inner.score("ctx", "a b"), inner.embed("ctx"), inner.generate("ctx", 4)
        cached = CachedBackend(MockBackend(seed=9), tmp_path / "cache.jsonl")
        first = cached.score("ctx", "a b"), cached.embed("ctx"), cached.generate("ctx", 4)
        assert first == uncached

        calls_before = dict(cached.inner.calls)
        second = cached.score("ctx", "a b"), cached.embed("ctx"), cached.generate("ctx", 4)
        assert second == first
        assert cached.inner.calls == calls_before  # hits issue no backend request

    def test_cache_persists_across_instances(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        first = CachedBackend(MockBackend(seed=3), path)
        seq = first.score("c", "x y z")

        fresh_inner = MockBackend(seed=3)
        second = CachedBackend(fresh_inner, path)
        assert second.score("c", "x y z") == seq
        assert fresh_inner.calls["score"] == 0

    def test_cache_file_is_jsonl_records(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        backend = CachedBackend(MockBackend(), path)
        backend.score("a", "b")
        backend.embed("a")
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert {r["operation"] for r in records} == {"score", "embed"}
        assert all({"key_hash", "operation", "payload"} <= set(r) for r in records)


# ---------------------------------------------------------------------------
# HTTP backend against a scripted local server
# ---------------------------------------------------------------------------


class _FakeServer:
    """Minimal OpenAI-style completions/embeddings/tokenize server."""

    def __init__(self):
        self.fail_next = 0
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append((self.path, body))
                if outer.fail_next > 0:
                    outer.fail_next -= 1
                    self.send_response(500)
                    self.end_headers()
                    self.wfile.write(b"boom")
                    return
                if self.path == "/v1/completions":
                    payload = outer.completions(body)
                elif self.path == "/v1/embeddings":
                    payload = outer.embeddings(body)
                elif self.path == "/v1/tokenize":
                    payload = outer.tokenize(body)
                else:
                    self.send_response(404)
                    self.end_headers()
                    return
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self):
        return f"http://127.0.0.1:{self.server.server_port}/v1"

    def close(self):
        self.server.shutdown()

    # whitespace tokenization with per-token logprob -0.25; first token null
    def completions(self, body):
        prompt = body["prompt"]
        if body.get("echo"):
            tokens, offsets = [], []
            pos = 0
            for word in prompt.split(" "):
                token = word if pos == 0 else " " + word
                tokens.append(token)
                offsets.append(pos)
                pos += len(token)
            logprobs = [None] + [-0.25] * (len(tokens) - 1)
            return {
                "choices": [
                    {
                        "text": "",
                        "logprobs": {
                            "tokens": tokens,
                            "token_logprobs": logprobs,
                            "text_offset": offsets,
                        },
                    }
                ]
            }
        return {"choices": [{"text": " generated code"}]}

    def embeddings(self, body):
        text = body["input"][0]
        return {"data": [{"embedding": [float(len(text)), 1.0, 2.0]}]}

    def tokenize(self, body):
        return {"count": len(body["prompt"].split())}


@pytest.fixture()
def fake_server():
    server = _FakeServer()
    yield server
    server.close()


class TestHttpBackend:
    def make(self, server, **kwargs):
        return HttpBackend(
            BackendConfig(base_url=server.base_url, model_name="fake", **kwargs)
        )

    def test_score_extracts_continuation_by_offset(self, fake_server):
        backend = self.make(fake_server)
        seq = backend.score("one two ", "three four")
        # continuation "three four" occupies the last two whitespace tokens
        assert seq.continuation_len == 2
        assert seq.logprobs == (-0.25, -0.25)

    def test_score_empty_context_skips_null_first_token(self, fake_server):
        backend = self.make(fake_server)
        seq = backend.score("", "alpha beta gamma")
        assert seq.continuation_len == 2  # first token has no conditional probability

    def test_two_call_mode(self, fake_server):
        backend = self.make(fake_server, score_mode="two_call")
        seq = backend.score("one two ", "three four")
        assert seq.continuation_len == 2

    def test_retry_then_success(self, fake_server):
        fake_server.fail_next = 2
        backend = self.make(fake_server)
        seq = backend.score("a ", "b c")
        assert seq.continuation_len == 2

    def test_transport_error_after_retries(self, fake_server):
        fake_server.fail_next = 99
        backend = self.make(fake_server)
        with pytest.raises(BackendTransportError):
            backend.score("a ", "b")

    def test_embed(self, fake_server):
        backend = self.make(fake_server)
        vec = backend.embed("xyz")
        assert vec.values == (3.0, 1.0, 2.0)
        assert vec.source_layer == 16
        assert vec.source_token == "EOS"

    def test_generate(self, fake_server):
        backend = self.make(fake_server)
        assert backend.generate("p", 8) == " generated code"

    def test_count_tokens(self, fake_server):
        backend = self.make(fake_server)
        assert backend.count_tokens("a b c") == 3
        assert backend.count_tokens("") == 0

    def test_capability_error_on_missing_endpoint(self, fake_server):
        backend = HttpBackend(
            BackendConfig(
                base_url=fake_server.base_url.replace("/v1", "/other"), model_name="fake"
            )
        )
        with pytest.raises(CapabilityError):
            backend.embed("x")

    def test_connection_refused_is_transport_error(self):
        backend = HttpBackend(
            BackendConfig(base_url="http://127.0.0.1:9/v1", model_name="fake")
        )
        backend.RETRIES = 1
        with pytest.raises(BackendTransportError):
            backend.generate("p", 1)

    def test_positive_logprob_response_rejected(self, fake_server):
        original = fake_server.completions

        def poisoned(body):
            payload = original(body)
            payload["choices"][0]["logprobs"]["token_logprobs"][-1] = 0.5
            return payload

        fake_server.completions = poisoned
        backend = self.make(fake_server)
        with pytest.raises(MalformedResponseError):
            backend.score("a ", "b c")
