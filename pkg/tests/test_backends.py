from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from twopass_dst.backends import (
    CompletionRequest,
    CostLedger,
    EchoHypothesisBackend,
    HttpBackend,
    HttpBackendConfig,
    OracleNoiseBackend,
    RecordBackend,
    ReplayBackend,
    estimate_flops,
    oracle_noise_complete,
    request_digest,
    truncate_at_stop,
)
from twopass_dst.errors import (
    BackendError,
    DataFormatError,
    MissingRecordingError,
    TransportError,
    ValidationError,
)
from twopass_dst.prompts import parse_tlb, render_tlb
from twopass_dst.schema import SchemaTable
from twopass_dst.states import TurnBelief

GOLD = TurnBelief.from_dict({"hotel-area": "east", "hotel-stars": "4"})
SCHEMA = SchemaTable.from_dict({
    "hotel": {
        "area": {"description": "area", "values": ["east", "west"]},
        "stars": {"description": "stars", "values": ["1", "2", "3", "4", "5"]},
        "parking": {"description": "parking", "values": ["yes", "no"]},
    },
})


class TestEstimateFlops:
    def test_reference_value(self):
        assert estimate_flops(8e9, 900, 100) == 1.6e13
        assert estimate_flops(8e9, 900, 100) / 1e12 == 16.0

    def test_zero_tokens(self):
        assert estimate_flops(1e9, 0, 0) == 0.0

    def test_linear_in_tokens(self):
        assert estimate_flops(1e9, 200, 200) == 2 * estimate_flops(1e9, 100, 100)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            estimate_flops(-1, 0, 0)


class TestTruncateAtStop:
    def test_cuts_at_first_stop(self):
        assert truncate_at_stop("abc\ndef", ["\n"]) == "abc"

    def test_no_stop_keeps_all(self):
        assert truncate_at_stop("abc", ["\n"]) == "abc"

    def test_earliest_of_multiple(self):
        assert truncate_at_stop("a|b;c", [";", "|"]) == "a"


class TestOracleNoise:
    def test_p_zero_is_gold(self):
        for key in ("d:1:first", "d:2:first", "x:9:second"):
            assert oracle_noise_complete(GOLD, 0.0, seed=1, turn_key=key) == render_tlb(GOLD)

    def test_p_one_never_gold(self):
        for seed in range(20):
            out = oracle_noise_complete(GOLD, 1.0, seed=seed, turn_key="d:1:first")
            assert out != render_tlb(GOLD)

    def test_deterministic(self):
        a = oracle_noise_complete(GOLD, 0.7, seed=5, turn_key="d:3:first", schema=SCHEMA)
        b = oracle_noise_complete(GOLD, 0.7, seed=5, turn_key="d:3:first", schema=SCHEMA)
        assert a == b

    def test_empty_gold_corruption_injects(self):
        out = oracle_noise_complete(TurnBelief(), 1.0, seed=2, turn_key="d:1:first",
                                    schema=SCHEMA)
        assert out != "NONE"
        assert parse_tlb(out).tlb

    def test_corruptions_stay_parseable(self):
        for seed in range(30):
            out = oracle_noise_complete(GOLD, 1.0, seed=seed, turn_key="d:1:first",
                                        schema=SCHEMA)
            parsed = parse_tlb(out)
            assert parsed.diagnostics == ()

    def test_backend_round_trip_with_parser(self):
        backend = OracleNoiseBackend({"d:1": GOLD}, p=0.0, seed=0)
        response = backend.complete(CompletionRequest("prompt", request_tag="d:1:first"))
        assert parse_tlb(response.text).tlb == GOLD

    def test_unknown_tag_errors(self):
        backend = OracleNoiseBackend({"d:1": GOLD}, p=0.0, seed=0)
        with pytest.raises(BackendError, match="no gold fixture"):
            backend.complete(CompletionRequest("prompt", request_tag="nope:7:first"))

    def test_ledger_records_calls(self):
        ledger = CostLedger()
        backend = OracleNoiseBackend({"d:1": GOLD}, p=0.0, seed=0, ledger=ledger,
                                     params=8e9)
        backend.complete(CompletionRequest("a prompt", request_tag="d:1:first"))
        assert ledger.total_calls() == 1
        entry = ledger.entries[0]
        assert entry.flops == 2 * 8e9 * (entry.prompt_tokens + entry.completion_tokens)


class TestEchoBackend:
    def test_echoes_last_hyp_line(self):
        backend = EchoHypothesisBackend()
        prompt = "[HYP] hotel-area: east\n[TLB] x\n\n[TARGET]\n[HYP] hotel-stars: 4\n[TLB]"
        response = backend.complete(CompletionRequest(prompt, request_tag="d:1:second"))
        assert response.text == "hotel-stars: 4"

    def test_requires_hyp_line(self):
        backend = EchoHypothesisBackend()
        with pytest.raises(BackendError):
            backend.complete(CompletionRequest("no hypothesis here"))


class TestLedger:
    def test_totals_are_sums(self):
        ledger = CostLedger()
        ledger.register("a", 1e9)
        ledger.register("b", 2e9)
        ledger.record("a", 100, 10)
        ledger.record("a", 50, 5)
        ledger.record("b", 10, 1)
        totals = ledger.totals()
        assert totals["a"]["calls"] == 2
        assert totals["a"]["prompt_tokens"] == 150
        assert totals["a"]["flops"] == 2 * 1e9 * 110 + 2 * 1e9 * 55
        assert ledger.total_flops() == sum(e.flops for e in ledger.entries)

    def test_thread_safety(self):
        ledger = CostLedger()
        ledger.register("x", 1.0)

        def spam():
            for _ in range(200):
                ledger.record("x", 1, 1)

        threads = [threading.Thread(target=spam) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert ledger.total_calls() == 1600


class _Handler(BaseHTTPRequestHandler):
    server_version = "stub"
    behaviors: list[dict] = []
    calls: list[dict] = []

    def do_POST(self):  # noqa: N802 (stdlib naming)
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        type(self).calls.append({"path": self.path, "body": body})
        behavior = type(self).behaviors.pop(0) if type(self).behaviors else {"status": 200}
        status = behavior.get("status", 200)
        if status != 200:
            self.send_response(status)
            self.end_headers()
            self.wfile.write(b"{}")
            return
        if self.path.endswith("/chat/completions"):
            payload = {"choices": [{"message": {"content": behavior.get("text", "hotel-area: east")}}]}
        else:
            payload = {"choices": [{"text": behavior.get("text", "hotel-area: east")}]}
        if "usage" in behavior:
            payload["usage"] = behavior["usage"]
        raw = json.dumps(payload).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    _Handler.behaviors = []
    _Handler.calls = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", _Handler
    server.shutdown()
    thread.join(timeout=2)


class TestHttpBackend:
    def config(self, url, **kwargs):
        defaults = dict(base_url=url, model="test-model", backoff_s=0.0, params=1e9)
        defaults.update(kwargs)
        return HttpBackendConfig(**defaults)

    def test_completions_round_trip(self, stub_server):
        url, handler = stub_server
        handler.behaviors = [{"text": "hotel-area: east\nextra", "usage": {
            "prompt_tokens": 42, "completion_tokens": 7}}]
        backend = HttpBackend(self.config(url))
        response = backend.complete(CompletionRequest("p", request_tag="d:1:first"))
        assert response.text == "hotel-area: east"
        assert (response.prompt_tokens, response.completion_tokens) == (42, 7)
        assert handler.calls[0]["body"]["model"] == "test-model"
        assert handler.calls[0]["body"]["stop"] == ["\n"]

    def test_chat_api_shape(self, stub_server):
        url, handler = stub_server
        backend = HttpBackend(self.config(url, api="chat"))
        backend.complete(CompletionRequest("the prompt"))
        body = handler.calls[0]["body"]
        assert body["messages"] == [{"role": "user", "content": "the prompt"}]

    def test_retries_on_5xx_then_succeeds(self, stub_server):
        url, handler = stub_server
        handler.behaviors = [{"status": 500}, {"status": 503}, {"text": "ok-text"}]
        backend = HttpBackend(self.config(url))
        response = backend.complete(CompletionRequest("p"))
        assert response.text == "ok-text"
        assert len(handler.calls) == 3

    def test_gives_up_after_max_attempts(self, stub_server):
        url, handler = stub_server
        handler.behaviors = [{"status": 500}] * 5
        backend = HttpBackend(self.config(url, max_attempts=3))
        with pytest.raises(TransportError, match="3 attempts"):
            backend.complete(CompletionRequest("p"))
        assert len(handler.calls) == 3

    def test_4xx_is_no_retry(self, stub_server):
        url, handler = stub_server
        handler.behaviors = [{"status": 400}]
        backend = HttpBackend(self.config(url))
        with pytest.raises(BackendError, match="400"):
            backend.complete(CompletionRequest("p"))
        assert len(handler.calls) == 1

    def test_estimates_tokens_when_usage_missing(self, stub_server):
        url, _handler = stub_server
        backend = HttpBackend(self.config(url))
        response = backend.complete(CompletionRequest("one two three"))
        assert response.prompt_tokens == 3
        assert response.completion_tokens > 0


class TestHttpEmbeddingBackend:
    def test_embeddings_round_trip(self, stub_server):
        import numpy as np

        from twopass_dst.retrieval import HttpEmbeddingBackend

        url, handler = stub_server
        # Reuse the stub by swapping its POST handler for an embeddings shape.
        original = handler.do_POST

        def do_post(self):
            length = int(self.headers["Content-Length"])
            body = json.loads(self.rfile.read(length))
            type(self).calls.append({"path": self.path, "body": body})
            raw = json.dumps({
                "data": [{"embedding": [float(len(text)), 1.0, 0.0]}
                         for text in body["input"]],
            }).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        handler.do_POST = do_post
        try:
            backend = HttpEmbeddingBackend(url, model="encoder", dim=3)
            vectors = backend.embed_many(["ab", "abcd"])
            assert np.allclose(vectors[0], [2.0, 1.0, 0.0])
            assert np.allclose(vectors[1], [4.0, 1.0, 0.0])
            assert handler.calls[-1]["body"]["input"] == ["ab", "abcd"]
            assert handler.calls[-1]["path"].endswith("/embeddings")
            single = backend.embed("ab")
            assert np.allclose(single, [2.0, 1.0, 0.0])
        finally:
            handler.do_POST = original

    def test_dim_mismatch_rejected(self, stub_server):
        from twopass_dst.retrieval import HttpEmbeddingBackend

        url, handler = stub_server
        original = handler.do_POST

        def do_post(self):
            length = int(self.headers["Content-Length"])
            json.loads(self.rfile.read(length))
            raw = json.dumps({"data": [{"embedding": [1.0, 2.0]}]}).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        handler.do_POST = do_post
        try:
            backend = HttpEmbeddingBackend(url, model="encoder", dim=5)
            with pytest.raises(BackendError, match="dim"):
                backend.embed("text")
        finally:
            handler.do_POST = original


class TestRecordReplay:
    def oracle(self, ledger=None):
        return OracleNoiseBackend({"d:1": GOLD}, p=0.0, seed=0, ledger=ledger)

    def test_record_then_replay_identical(self, tmp_path):
        path = tmp_path / "rec.jsonl"
        recorder = RecordBackend(self.oracle(), path)
        request = CompletionRequest("prompt text", request_tag="d:1:first")
        first = recorder.complete(request)
        replayer = ReplayBackend(path)
        again = replayer.complete(request)
        assert again.text == first.text
        assert (again.prompt_tokens, again.completion_tokens) == (
            first.prompt_tokens, first.completion_tokens)

    def test_repeat_requests_served_from_cache(self, tmp_path):
        path = tmp_path / "rec.jsonl"
        recorder = RecordBackend(self.oracle(), path)
        request = CompletionRequest("prompt text", request_tag="d:1:first")
        recorder.complete(request)
        recorder.complete(request)
        assert len(path.read_text().splitlines()) == 1

    def test_replay_missing_digest(self, tmp_path):
        path = tmp_path / "rec.jsonl"
        RecordBackend(self.oracle(), path).complete(
            CompletionRequest("prompt", request_tag="d:1:first"))
        replayer = ReplayBackend(path)
        with pytest.raises(MissingRecordingError) as info:
            replayer.complete(CompletionRequest("different prompt", request_tag="d:1:first"))
        assert request_digest(CompletionRequest("different prompt",
                                                request_tag="d:1:first")) in str(info.value)

    def test_replay_ledger_counts_calls(self, tmp_path):
        path = tmp_path / "rec.jsonl"
        recorder = RecordBackend(self.oracle(), path)
        for i, text in enumerate(["a", "b", "c"]):
            recorder.complete(CompletionRequest(text, request_tag="d:1:first"))
        ledger = CostLedger()
        replayer = ReplayBackend(path, ledger)
        for text in ["a", "b", "c"]:
            replayer.complete(CompletionRequest(text, request_tag="d:1:first"))
        assert ledger.total_calls() == 3

    def test_tampered_line_reports_line_number(self, tmp_path):
        path = tmp_path / "rec.jsonl"
        RecordBackend(self.oracle(), path).complete(
            CompletionRequest("prompt", request_tag="d:1:first"))
        path.write_text(path.read_text() + "{broken\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match=":2:"):
            ReplayBackend(path)

    def test_digest_excludes_request_tag(self):
        a = CompletionRequest("same prompt", request_tag="d:1:first")
        b = CompletionRequest("same prompt", request_tag="e:9:second")
        assert request_digest(a) == request_digest(b)

    def test_replay_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            ReplayBackend(tmp_path / "absent.jsonl")
