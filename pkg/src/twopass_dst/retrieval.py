"""Embedding-based exemplar retrieval and the encoder supervision export.

The index is an exhaustive-scan cosine store: vectors are L2-normalized at
insert, queries are normalized at lookup, and similarity is the plain dot
product. Ties are broken by ascending example id so results are fully
deterministic. At a 5% training split the pool is small enough that nothing
fancier is warranted.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import BackendError, DataFormatError, ValidationError
from .metrics import EMPTY_SYNONYMS, set_f1
from .prompts import NONE_PAIRS, STATE_MARK, SYS_MARK, USER_MARK, render_pairs
from .states import ContextWindow, DialogueState, TurnBelief


def serialize_for_embedding(prev_state: DialogueState, ctx: ContextWindow) -> str:
    """Single-line canonical text for the retriever's encoder."""
    parts = [STATE_MARK, render_pairs(prev_state) if prev_state else NONE_PAIRS]
    for system, user in ctx.exchanges:
        parts.append(SYS_MARK)
        parts.append(system if system else "[NONE]")
        parts.append(USER_MARK)
        parts.append(user if user else "[NONE]")
    return " ".join(parts)


class EmbeddingBackend(Protocol):
    """Deterministic text -> vector encoder."""

    @property
    def dim(self) -> int: ...

    def embed(self, text: str) -> np.ndarray: ...


class HashEmbeddingBackend:
    """Test encoder: a seeded pseudo-random projection of the text hash.

    Identical text always maps to the identical vector, across processes,
    which is all the pipeline tests need from an encoder.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValidationError(f"embedding dim must be >= 1, got {dim}")
        self._dim = dim
        self._seed = seed

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self._seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return rng.standard_normal(self._dim)


class HttpEmbeddingBackend:
    """Encoder served over HTTP with the common embeddings JSON shape.

    POST ``{"input": [texts], "model": name}`` and read
    ``{"data": [{"embedding": [...]}, ...]}`` back.
    """

    def __init__(self, base_url: str, model: str, dim: int,
                 api_key: str | None = None, timeout_s: float = 30.0,
                 session=None):
        import requests

        self._url = base_url.rstrip("/") + "/embeddings"
        self._model = model
        self._dim = dim
        self._api_key = api_key
        self._timeout = timeout_s
        self._session = session or requests.Session()

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        import requests

        headers = {}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        try:
            response = self._session.post(
                self._url, json={"input": list(texts), "model": self._model},
                headers=headers, timeout=self._timeout,
            )
        except requests.RequestException as exc:
            raise BackendError(f"embedding request failed: {exc}") from exc
        if response.status_code >= 400:
            raise BackendError(
                f"embedding server returned {response.status_code}: {response.text[:200]}"
            )
        payload = response.json()
        vectors = [np.asarray(item["embedding"], dtype=np.float64) for item in payload["data"]]
        for vec in vectors:
            if vec.shape != (self._dim,):
                raise BackendError(
                    f"embedding server returned dim {vec.shape}, expected ({self._dim},)"
                )
        return vectors


@dataclass(frozen=True)
class ExamplePayload:
    """Everything a retrieved training turn contributes to a prompt."""

    dialogue_id: str
    turn_index: int
    domains: frozenset[str]
    prev_state: DialogueState
    ctx: ContextWindow
    gold_tlb: TurnBelief
    hypothesis: TurnBelief | None = None


@dataclass(frozen=True)
class IndexEntry:
    example_id: str
    vector: np.ndarray
    payload: ExamplePayload


@dataclass(frozen=True)
class RetrievalResult:
    """Entries with scores, non-increasing, ties broken by ascending id."""

    hits: tuple[tuple[IndexEntry, float], ...]

    def entries(self) -> tuple[IndexEntry, ...]:
        return tuple(entry for entry, _ in self.hits)

    def ids(self) -> tuple[str, ...]:
        return tuple(entry.example_id for entry, _ in self.hits)

    def __len__(self) -> int:
        return len(self.hits)


def _normalize(vector: np.ndarray, context: str) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1:
        raise ValidationError(f"{context}: expected a 1-d vector, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise ValidationError(f"{context}: vector has non-finite entries")
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ValidationError(f"{context}: zero vector cannot be normalized")
    return vector / norm


class Index:
    """Immutable exhaustive-scan cosine index."""

    def __init__(self, entries: Sequence[IndexEntry]):
        if not entries:
            raise ValidationError("index needs at least one entry")
        ordered = sorted(entries, key=lambda e: e.example_id)
        ids = [e.example_id for e in ordered]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate example ids in index: {dupes}")
        dims = {e.vector.shape for e in ordered}
        if len(dims) != 1:
            raise ValidationError(f"mixed vector dims in index: {sorted(dims)}")
        self._entries = tuple(ordered)
        self._by_id = {e.example_id: e for e in ordered}
        self._matrix = np.stack([e.vector for e in ordered])

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, example_id: str) -> bool:
        return example_id in self._by_id

    @property
    def entries(self) -> tuple[IndexEntry, ...]:
        return self._entries

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def entry(self, example_id: str) -> IndexEntry:
        try:
            return self._by_id[example_id]
        except KeyError:
            raise ValidationError(f"unknown example id {example_id!r}") from None

    def with_hypotheses(self, hypotheses: Mapping[str, TurnBelief],
                        keep_missing: bool = True) -> "Index":
        """Attach stored hypotheses; optionally drop entries without one."""
        entries = []
        for entry in self._entries:
            hyp = hypotheses.get(entry.example_id)
            if hyp is None and not keep_missing:
                continue
            if hyp is None:
                entries.append(entry)
            else:
                entries.append(replace(entry, payload=replace(entry.payload, hypothesis=hyp)))
        return Index(entries)


def build_index(examples: Sequence[tuple[str, ExamplePayload]],
                backend: EmbeddingBackend) -> Index:
    """Embed one entry per training turn; vectors are L2-normalized at insert."""
    if not examples:
        raise ValidationError("cannot build an index from zero examples")
    entries: list[IndexEntry] = []
    for example_id, payload in sorted(examples, key=lambda item: item[0]):
        text = serialize_for_embedding(payload.prev_state, payload.ctx)
        try:
            vector = _normalize(backend.embed(text), "vector")
        except Exception as exc:
            raise BackendError(f"embedding failed for {example_id!r}: {exc}") from exc
        entries.append(IndexEntry(example_id, vector, payload))
    return Index(entries)


def retrieve(index: Index, query: np.ndarray, k: int,
             exclude: Iterable[str] = ()) -> RetrievalResult:
    """Top-k by cosine similarity over the whole index, minus excluded ids."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    excluded = set(exclude)
    query = _normalize(query, "query")
    scores = index._matrix @ query
    candidates = [
        (entry, float(scores[i]))
        for i, entry in enumerate(index.entries)
        if entry.example_id not in excluded
    ]
    if not candidates:
        raise ValidationError("index is empty after applying the exclusion set")
    candidates.sort(key=lambda item: (-item[1], item[0].example_id))
    return RetrievalResult(tuple(candidates[:k]))


def similarity_label(a: TurnBelief, b: TurnBelief) -> float:
    """Supervision label for encoder tuning: plain F1 between two beliefs."""
    return set_f1(a, b, EMPTY_SYNONYMS)[2]


def export_retriever_pairs(examples: Sequence[tuple[str, ExamplePayload]],
                           per_anchor: int, seed: int, path: str | Path) -> int:
    """Write encoder supervision pairs as JSONL.

    Each anchor turn is paired with ``per_anchor`` other turns, labeled with
    the F1 of their gold beliefs. Sampling is seeded and stratified: when
    candidates exist, at least one pair has label >= 0.5 and one has label 0.
    Returns the number of lines written.
    """
    if per_anchor < 1:
        raise ValidationError(f"per_anchor must be >= 1, got {per_anchor}")
    if not examples:
        raise ValidationError("no training turns to export pairs from")
    ordered = sorted(examples, key=lambda item: item[0])
    rng = random.Random(seed)
    lines: list[str] = []
    for anchor_id, anchor in ordered:
        anchor_text = serialize_for_embedding(anchor.prev_state, anchor.ctx)
        candidates = [(cid, c) for cid, c in ordered if cid != anchor_id]
        if not candidates:
            continue
        labeled = [
            (cid, c, similarity_label(anchor.gold_tlb, c.gold_tlb)) for cid, c in candidates
        ]
        high = [item for item in labeled if item[2] >= 0.5]
        zero = [item for item in labeled if item[2] == 0.0]
        chosen: list[tuple[str, ExamplePayload, float]] = []
        taken: set[str] = set()
        for pool in (high, zero):
            if len(chosen) >= per_anchor or not pool:
                continue
            pick = rng.choice(pool)
            if pick[0] not in taken:
                chosen.append(pick)
                taken.add(pick[0])
        remaining = [item for item in labeled if item[0] not in taken]
        fill = min(per_anchor - len(chosen), len(remaining))
        if fill > 0:
            chosen.extend(rng.sample(remaining, fill))
        for cid, candidate, label in chosen:
            lines.append(json.dumps({
                "anchor_text": anchor_text,
                "candidate_text": serialize_for_embedding(candidate.prev_state, candidate.ctx),
                "label": label,
            }, sort_keys=True, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return len(lines)


def save_index(index: Index, path: str | Path) -> None:
    """Persist vectors as JSONL; payloads are rebuilt from the split file."""
    lines = []
    for entry in index.entries:
        lines.append(json.dumps({
            "example_id": entry.example_id,
            "ref": {"dialogue_id": entry.payload.dialogue_id, "turn": entry.payload.turn_index},
            "vector": [float(x) for x in entry.vector],
        }, sort_keys=True, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_index(path: str | Path, payloads: Mapping[str, ExamplePayload]) -> Index:
    """Rebuild an index from a vector sidecar plus freshly derived payloads.

    Stored vectors are already normalized; they are validated but used as
    written so a loaded index scores identically to the one that was saved.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"index file not found: {path}") from None
    entries: list[IndexEntry] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            example_id = record["example_id"]
            vector = np.asarray(record["vector"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataFormatError(f"bad index line: {exc}", path=str(path), line=lineno) from None
        if example_id not in payloads:
            raise DataFormatError(
                f"index entry {example_id!r} has no payload in the split",
                path=str(path), line=lineno,
            )
        if vector.ndim != 1 or not np.all(np.isfinite(vector)) or \
                abs(float(np.linalg.norm(vector)) - 1.0) > 1e-6:
            raise DataFormatError(
                f"index entry {example_id!r} does not hold a unit vector",
                path=str(path), line=lineno,
            )
        entries.append(IndexEntry(example_id, vector, payloads[example_id]))
    return Index(entries)
