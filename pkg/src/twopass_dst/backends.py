"""Completion backends behind one contract, with token and FLOP accounting.

Every backend implements ``complete(request) -> CompletionResponse``,
truncates at the first stop sequence, and records the call in a shared
CostLedger. Besides the real HTTP backend there are deterministic test
doubles: a gold-output oracle with seeded corruption, an echo backend that
returns the hypothesis unchanged, and record/replay wrappers so expensive
endpoint runs can be captured once and replayed byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import (
    BackendError,
    DataFormatError,
    DigestCollisionError,
    MissingRecordingError,
    TransportError,
    ValidationError,
)
from .prompts import HYP_MARK, estimate_tokens, render_tlb
from .schema import SchemaTable
from .states import TurnBelief

TERA = 1e12


def estimate_flops(params: float, prompt_tokens: int, completion_tokens: int) -> float:
    """First-order forward-pass cost: 2 * parameters * total tokens."""
    if params < 0 or prompt_tokens < 0 or completion_tokens < 0:
        raise ValidationError("flops inputs must be non-negative")
    return 2.0 * params * (prompt_tokens + completion_tokens)


@dataclass(frozen=True)
class CompletionRequest:
    prompt_text: str
    max_new_tokens: int = 256
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ("\n",)
    request_tag: str = ""

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValidationError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    backend_id: str

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValidationError("token counts must be >= 0")


@dataclass(frozen=True)
class LedgerEntry:
    backend_id: str
    prompt_tokens: int
    completion_tokens: int
    flops: float


class CostLedger:
    """Thread-safe token and FLOP totals across all backend calls."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []
        self._params: dict[str, float] = {}

    def register(self, backend_id: str, params: float) -> None:
        with self._lock:
            self._params[backend_id] = params

    def record(self, backend_id: str, prompt_tokens: int, completion_tokens: int) -> None:
        params = self._params.get(backend_id, 0.0)
        entry = LedgerEntry(
            backend_id, prompt_tokens, completion_tokens,
            estimate_flops(params, prompt_tokens, completion_tokens),
        )
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def totals(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for entry in self.entries:
            bucket = out.setdefault(entry.backend_id, {
                "calls": 0, "prompt_tokens": 0, "completion_tokens": 0,
                "flops": 0.0, "params": self._params.get(entry.backend_id, 0.0),
            })
            bucket["calls"] += 1
            bucket["prompt_tokens"] += entry.prompt_tokens
            bucket["completion_tokens"] += entry.completion_tokens
            bucket["flops"] += entry.flops
        return out

    def total_flops(self) -> float:
        return sum(entry.flops for entry in self.entries)

    def total_teraflops(self) -> float:
        return self.total_flops() / TERA

    def total_calls(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict:
        per_backend = {
            backend_id: {**bucket, "teraflops": bucket["flops"] / TERA}
            for backend_id, bucket in sorted(self.totals().items())
        }
        return {
            "backends": per_backend,
            "total_calls": self.total_calls(),
            "total_flops": self.total_flops(),
            "total_teraflops": self.total_teraflops(),
        }


def truncate_at_stop(text: str, stop_sequences: Sequence[str]) -> str:
    cut = len(text)
    for stop in stop_sequences:
        pos = text.find(stop)
        if pos != -1:
            cut = min(cut, pos)
    return text[:cut]


class CompletionBackend:
    """Shared bookkeeping: stop-sequence truncation and ledger recording."""

    backend_id: str = "backend"
    params: float = 0.0

    def __init__(self, ledger: CostLedger | None = None):
        self.ledger = ledger or CostLedger()
        self.ledger.register(self.backend_id, self.params)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        text, prompt_tokens, completion_tokens = self._generate(request)
        text = truncate_at_stop(text, request.stop_sequences)
        if prompt_tokens is None:
            prompt_tokens = estimate_tokens(request.prompt_text)
        if completion_tokens is None:
            completion_tokens = estimate_tokens(text) if text else 0
        self.ledger.record(self.backend_id, prompt_tokens, completion_tokens)
        return CompletionResponse(text, prompt_tokens, completion_tokens, self.backend_id)

    def _generate(self, request: CompletionRequest) -> tuple[str, int | None, int | None]:
        raise NotImplementedError


def oracle_noise_complete(gold: TurnBelief, p: float, seed: int, turn_key: str,
                          schema: SchemaTable | None = None) -> str:
    """Gold rendering with probability 1 - p, else one seeded corruption.

    Corruptions: drop a pair, perturb a value, or inject a spurious pair
    (schema-valid when a schema is supplied). Deterministic in (seed, key).
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"corruption rate must be in [0, 1], got {p}")
    rng = random.Random(f"{seed}:{turn_key}")
    if rng.random() >= p:
        return render_tlb(gold)

    pairs = gold.to_dict()
    moves = ["inject"]
    if pairs:
        moves = ["drop", "perturb", "inject"]
    move = rng.choice(moves)
    if move == "drop":
        del pairs[rng.choice(sorted(pairs))]
    elif move == "perturb":
        slot = rng.choice(sorted(pairs))
        pairs[slot] = f"not {pairs[slot]}"
    else:
        candidates = []
        if schema is not None:
            candidates = sorted(schema.all_slots() - set(pairs))
        if candidates:
            slot = rng.choice(candidates)
            spec = schema.slot_spec(slot)
            value = rng.choice(list(spec.values)) if spec.values else rng.choice(
                ["1", "2", "yes", "no"])
        else:
            slot, value = "misc-extra", "yes"
        pairs[slot] = value
    return render_tlb(TurnBelief.from_dict(pairs))


class OracleNoiseBackend(CompletionBackend):
    """Emits the tagged turn's gold belief, corrupted with probability p.

    Requests must carry a ``dialogue_id:turn:pass`` tag whose first two
    segments key into the gold fixture map.
    """

    def __init__(self, golds: Mapping[str, TurnBelief], p: float, seed: int,
                 schema: SchemaTable | None = None, ledger: CostLedger | None = None,
                 params: float = 0.0, backend_id: str = "oracle"):
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"corruption rate must be in [0, 1], got {p}")
        self.backend_id = backend_id
        self.params = params
        self._golds = dict(golds)
        self._p = p
        self._seed = seed
        self._schema = schema
        super().__init__(ledger)

    def _generate(self, request: CompletionRequest) -> tuple[str, int | None, int | None]:
        segments = request.request_tag.split(":")
        if len(segments) < 2:
            raise BackendError(
                f"oracle backend needs a 'dialogue_id:turn[:pass]' tag, got {request.request_tag!r}"
            )
        key = ":".join(segments[:2])
        if key not in self._golds:
            raise BackendError(f"no gold fixture for request tag {request.request_tag!r}")
        text = oracle_noise_complete(self._golds[key], self._p, self._seed,
                                     request.request_tag, self._schema)
        return text, None, None


class EchoHypothesisBackend(CompletionBackend):
    """Returns the prompt's final [HYP] line verbatim: the identity corrector."""

    def __init__(self, ledger: CostLedger | None = None, params: float = 0.0,
                 backend_id: str = "echo"):
        self.backend_id = backend_id
        self.params = params
        super().__init__(ledger)

    def _generate(self, request: CompletionRequest) -> tuple[str, int | None, int | None]:
        hyp_lines = [
            line[len(HYP_MARK) + 1:]
            for line in request.prompt_text.splitlines()
            if line.startswith(HYP_MARK + " ")
        ]
        if not hyp_lines:
            raise BackendError("echo backend needs a prompt with a [HYP] line")
        return hyp_lines[-1], None, None


@dataclass(frozen=True)
class HttpBackendConfig:
    base_url: str
    model: str
    api: str = "completions"  # or "chat"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 0.5
    max_concurrency: int = 4
    params: float = 0.0
    backend_id: str = "http"

    def __post_init__(self) -> None:
        if self.api not in ("completions", "chat"):
            raise ValidationError(f"api must be 'completions' or 'chat', got {self.api!r}")
        if self.max_attempts < 1:
            raise ValidationError("max_attempts must be >= 1")
        if self.max_concurrency < 1:
            raise ValidationError("max_concurrency must be >= 1")


_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class HttpBackend(CompletionBackend):
    """OpenAI-compatible completions/chat client with bounded concurrency.

    Retries transport failures and retryable status codes with exponential
    backoff; anything else surfaces immediately. Token counts come from the
    server's usage block when present, otherwise from the local estimator.
    """

    def __init__(self, config: HttpBackendConfig, ledger: CostLedger | None = None,
                 session=None, sleep=time.sleep):
        import requests

        self.backend_id = config.backend_id
        self.params = config.params
        self._config = config
        self._session = session or requests.Session()
        self._sleep = sleep
        self._semaphore = threading.Semaphore(config.max_concurrency)
        super().__init__(ledger)

    def _payload(self, request: CompletionRequest) -> tuple[str, dict]:
        cfg = self._config
        common = {
            "model": cfg.model,
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "stop": list(request.stop_sequences),
        }
        if cfg.api == "chat":
            return "/chat/completions", {
                **common, "messages": [{"role": "user", "content": request.prompt_text}],
            }
        return "/completions", {**common, "prompt": request.prompt_text}

    def _generate(self, request: CompletionRequest) -> tuple[str, int | None, int | None]:
        import requests

        cfg = self._config
        path, payload = self._payload(request)
        url = cfg.base_url.rstrip("/") + path
        headers = {}
        api_key = os.environ.get(cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: str = ""
        for attempt in range(cfg.max_attempts):
            if attempt:
                self._sleep(cfg.backoff_s * (2 ** (attempt - 1)))
            try:
                with self._semaphore:
                    response = self._session.post(
                        url, json=payload, headers=headers, timeout=cfg.timeout_s
                    )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            if response.status_code in _RETRYABLE_STATUS:
                last_error = f"server returned {response.status_code}"
                continue
            if response.status_code >= 400:
                raise BackendError(
                    f"{self.backend_id}: request failed with {response.status_code}: "
                    f"{response.text[:200]}"
                )
            try:
                data = response.json()
                choice = data["choices"][0]
                text = choice["message"]["content"] if cfg.api == "chat" else choice["text"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"{self.backend_id}: malformed response: {exc}") from exc
            usage = data.get("usage") or {}
            return (
                str(text),
                usage.get("prompt_tokens"),
                usage.get("completion_tokens"),
            )
        raise TransportError(
            f"{self.backend_id}: giving up after {cfg.max_attempts} attempts ({last_error})"
        )


def request_digest(request: CompletionRequest) -> str:
    """Content-addressed key for record/replay; excludes the request tag."""
    canon = json.dumps({
        "prompt_text": request.prompt_text,
        "max_new_tokens": request.max_new_tokens,
        "temperature": request.temperature,
        "stop_sequences": list(request.stop_sequences),
    }, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _load_recordings(path: Path) -> dict[str, dict]:
    recordings: dict[str, dict] = {}
    if not path.exists():
        return recordings
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            digest = record["digest"]
            record["text"]
            int(record["prompt_tokens"])
            int(record["completion_tokens"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"bad recording: {exc}", path=str(path), line=lineno) from None
        if digest in recordings and recordings[digest]["text"] != record["text"]:
            raise DigestCollisionError(
                f"{path}:{lineno}: digest {digest} recorded with two different responses"
            )
        recordings[digest] = record
    return recordings


class RecordBackend(CompletionBackend):
    """Wraps another backend and appends each new response to a JSONL file.

    Repeat requests with an identical digest are served from the recording
    without calling the inner backend again.
    """

    def __init__(self, inner: CompletionBackend, path: str | Path,
                 ledger: CostLedger | None = None):
        self.backend_id = f"record({inner.backend_id})"
        self.params = inner.params
        self._inner = inner
        self._path = Path(path)
        self._recordings = _load_recordings(self._path)
        self._write_lock = threading.Lock()
        super().__init__(ledger)

    def _generate(self, request: CompletionRequest) -> tuple[str, int | None, int | None]:
        digest = request_digest(request)
        cached = self._recordings.get(digest)
        if cached is not None:
            return cached["text"], cached["prompt_tokens"], cached["completion_tokens"]
        response = self._inner.complete(request)
        record = {
            "digest": digest,
            "request_summary": {
                "request_tag": request.request_tag,
                "max_new_tokens": request.max_new_tokens,
                "temperature": request.temperature,
                "stop_sequences": list(request.stop_sequences),
                "prompt_chars": len(request.prompt_text),
            },
            "text": response.text,
            "prompt_tokens": response.prompt_tokens,
            "completion_tokens": response.completion_tokens,
        }
        with self._write_lock:
            existing = self._recordings.get(digest)
            if existing is not None and existing["text"] != record["text"]:
                raise DigestCollisionError(
                    f"digest {digest} produced two different responses in one run"
                )
            if existing is None:
                self._recordings[digest] = record
                with self._path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        return record["text"], record["prompt_tokens"], record["completion_tokens"]


class ReplayBackend(CompletionBackend):
    """Serves recorded responses only; unknown digests are hard errors."""

    def __init__(self, path: str | Path, ledger: CostLedger | None = None,
                 params: float = 0.0, backend_id: str = "replay"):
        self.backend_id = backend_id
        self.params = params
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"recording file not found: {path}")
        self._recordings = _load_recordings(path)
        super().__init__(ledger)

    def _generate(self, request: CompletionRequest) -> tuple[str, int | None, int | None]:
        digest = request_digest(request)
        record = self._recordings.get(digest)
        if record is None:
            raise MissingRecordingError(digest)
        return record["text"], record["prompt_tokens"], record["completion_tokens"]
