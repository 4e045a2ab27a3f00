"""Two-pass run orchestration and the correction-tuning data factory.

Inference: pass one retrieves demonstrations per turn, prompts the inference
backend, parses a hypothesis, and accumulates a predicted state; pass two
reuses the same retrieved examples, now augmented with their own stored
hypotheses, and prompts the correction backend to revise.

Training factory: five fixed demonstrations are sampled once, every training
turn is prompted with them (itself excluded) to collect a hypothesis, and
correction sequences ending in the gold belief are exported for tuning.
Dialogues run concurrently; turns within a dialogue are strictly sequential;
all outputs are written in dialogue-id order so reruns are byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backends import (
    CompletionBackend,
    CompletionRequest,
    CostLedger,
    EchoHypothesisBackend,
    HttpBackend,
    HttpBackendConfig,
    OracleNoiseBackend,
    RecordBackend,
    ReplayBackend,
)
from .datasets import DatasetSplit, load_dataset, sample_low_resource, write_dataset
from .errors import (
    BackendError,
    ConfigError,
    StageError,
    TlbParseError,
    ValidationError,
)
from .metrics import (
    EMPTY_SYNONYMS,
    MetricsReport,
    SynonymTable,
    TurnRecord,
    breakdown_by_category,
    evaluate_run,
)
from .prompts import (
    Exemplar,
    PromptStyle,
    build_correction_prompt,
    build_inference_prompt,
    parse_tlb,
    render_training_sequence,
)
from .retrieval import (
    EmbeddingBackend,
    ExamplePayload,
    HashEmbeddingBackend,
    HttpEmbeddingBackend,
    Index,
    build_index,
    export_retriever_pairs,
    retrieve,
    save_index,
    serialize_for_embedding,
)
from .schema import SchemaTable, load_schema
from .states import Dialogue, DialogueState, TurnBelief, aggregate_state, context_window

FIXED_DEMO_COUNT = 5


@dataclass(frozen=True)
class Seeds:
    split: int
    demos: int
    noise: int


@dataclass(frozen=True)
class BackendSpec:
    """Declarative backend description, resolved by ``make_backend``."""

    kind: str
    p: float = 0.0
    seed: int | None = None
    params: float = 0.0
    path: str | None = None
    inner: "BackendSpec | None" = None
    base_url: str | None = None
    model: str | None = None
    api: str = "completions"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    max_attempts: int = 3
    max_concurrency: int = 4

    _KINDS = ("oracle_noise", "echo", "http", "replay", "record")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ConfigError(f"backend kind must be one of {self._KINDS}, got {self.kind!r}")
        if self.kind == "http" and not (self.base_url and self.model):
            raise ConfigError("http backends need base_url and model")
        if self.kind in ("replay", "record") and not self.path:
            raise ConfigError(f"{self.kind} backends need a path")
        if self.kind == "record" and self.inner is None:
            raise ConfigError("record backends need an inner backend spec")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        defaults = BackendSpec.__dataclass_fields__
        for name in ("p", "seed", "params", "path", "base_url", "model", "api",
                     "api_key_env", "timeout_s", "max_attempts", "max_concurrency"):
            value = getattr(self, name)
            if value != defaults[name].default:
                out[name] = value
        if self.inner is not None:
            out["inner"] = self.inner.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackendSpec":
        data = dict(data)
        inner = data.pop("inner", None)
        unknown = set(data) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown backend keys {sorted(unknown)}")
        if inner is not None:
            data["inner"] = cls.from_dict(inner)
        return cls(**data)


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = "hash"
    dim: int = 64
    seed: int = 0
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self) -> None:
        if self.kind not in ("hash", "http"):
            raise ConfigError(f"embedding kind must be 'hash' or 'http', got {self.kind!r}")
        if self.kind == "http" and not (self.base_url and self.model):
            raise ConfigError("http embedding backends need base_url and model")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "dim": self.dim, "seed": self.seed}
        if self.base_url:
            out["base_url"] = self.base_url
        if self.model:
            out["model"] = self.model
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "EmbeddingSpec":
        unknown = set(data) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown embedding keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    schema_path: str
    train_path: str
    eval_path: str
    output_dir: str
    style: PromptStyle
    seeds: Seeds
    inference_backend: BackendSpec
    correction_backend: BackendSpec
    embedding: EmbeddingSpec = EmbeddingSpec()
    k: int | None = None
    context_width: int | None = None
    fraction: float = 0.05
    strict_parsing: bool = False
    strict_data: bool = False
    max_concurrency: int = 4
    correction_instruction: str | None = None
    synonyms_path: str | None = None
    include_training_factory: bool = True
    second_pass: bool = True
    retriever_pairs_per_anchor: int = 2
    keep_prompts: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.context_width is not None and self.context_width < 1:
            raise ConfigError(f"context_width must be >= 1, got {self.context_width}")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")

    @property
    def effective_k(self) -> int:
        return self.k if self.k is not None else self.style.default_k

    @property
    def effective_width(self) -> int:
        return self.context_width if self.context_width is not None else self.style.default_width

    def to_dict(self) -> dict:
        return {
            "schema_path": self.schema_path,
            "train_path": self.train_path,
            "eval_path": self.eval_path,
            "output_dir": self.output_dir,
            "style": self.style.value,
            "seeds": {"split": self.seeds.split, "demos": self.seeds.demos, "noise": self.seeds.noise},
            "backends": {
                "inference": self.inference_backend.to_dict(),
                "correction": self.correction_backend.to_dict(),
                "embedding": self.embedding.to_dict(),
            },
            "k": self.effective_k,
            "context_width": self.effective_width,
            "fraction": self.fraction,
            "strict_parsing": self.strict_parsing,
            "strict_data": self.strict_data,
            "max_concurrency": self.max_concurrency,
            "correction_instruction": self.correction_instruction,
            "synonyms_path": self.synonyms_path,
            "include_training_factory": self.include_training_factory,
            "second_pass": self.second_pass,
            "retriever_pairs_per_anchor": self.retriever_pairs_per_anchor,
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class PredictionRecord:
    """Per-turn trace: gold annotations, both hypotheses, and provenance."""

    dialogue_id: str
    turn_index: int
    gold_tlb: TurnBelief
    gold_state: DialogueState
    hyp_tlb_first: TurnBelief
    hyp_state_first: DialogueState
    retrieval: tuple[tuple[str, float], ...] = ()
    prompt_digest_first: str = ""
    diagnostics_first: tuple[str, ...] = ()
    tokens_first: tuple[int, int] = (0, 0)
    hyp_tlb_final: TurnBelief | None = None
    hyp_state_final: DialogueState | None = None
    prompt_digest_second: str | None = None
    diagnostics_second: tuple[str, ...] | None = None
    tokens_second: tuple[int, int] | None = None
    error: str | None = None
    prompt_first: str | None = field(default=None, compare=False)
    prompt_second: str | None = field(default=None, compare=False)

    def as_turn_record(self) -> TurnRecord:
        return TurnRecord(
            dialogue_id=self.dialogue_id,
            turn_index=self.turn_index,
            gold_tlb=self.gold_tlb,
            gold_state=self.gold_state,
            hyp_tlb_first=self.hyp_tlb_first,
            hyp_tlb_final=self.hyp_tlb_final,
            hyp_state_final=self.hyp_state_final,
        )

    def to_json_dict(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "turn": self.turn_index,
            "tlb": self.gold_tlb.to_dict(),
            "state": self.gold_state.to_dict(),
            "hyp_tlb_first": self.hyp_tlb_first.to_dict(),
            "hyp_tlb_final": self.hyp_tlb_final.to_dict() if self.hyp_tlb_final is not None else None,
            "hyp_state_final": self.hyp_state_final.to_dict() if self.hyp_state_final is not None else None,
            "trace": {
                "hyp_state_first": self.hyp_state_first.to_dict(),
                "retrieval": [[example_id, score] for example_id, score in self.retrieval],
                "prompt_digest_first": self.prompt_digest_first,
                "prompt_digest_second": self.prompt_digest_second,
                "diagnostics_first": list(self.diagnostics_first),
                "diagnostics_second": list(self.diagnostics_second) if self.diagnostics_second is not None else None,
                "tokens_first": list(self.tokens_first),
                "tokens_second": list(self.tokens_second) if self.tokens_second is not None else None,
                "error": self.error,
            },
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "PredictionRecord":
        trace = data.get("trace") or {}
        return cls(
            dialogue_id=data["dialogue_id"],
            turn_index=int(data["turn"]),
            gold_tlb=TurnBelief.from_dict(data["tlb"]),
            gold_state=DialogueState.from_dict(data["state"]),
            hyp_tlb_first=TurnBelief.from_dict(data["hyp_tlb_first"]),
            hyp_state_first=DialogueState.from_dict(trace.get("hyp_state_first") or {}),
            retrieval=tuple((rid, float(score)) for rid, score in trace.get("retrieval", [])),
            prompt_digest_first=trace.get("prompt_digest_first", ""),
            diagnostics_first=tuple(trace.get("diagnostics_first", [])),
            tokens_first=tuple(trace.get("tokens_first", (0, 0))),
            hyp_tlb_final=(TurnBelief.from_dict(data["hyp_tlb_final"])
                           if data.get("hyp_tlb_final") is not None else None),
            hyp_state_final=(DialogueState.from_dict(data["hyp_state_final"])
                             if data.get("hyp_state_final") is not None else None),
            prompt_digest_second=trace.get("prompt_digest_second"),
            diagnostics_second=(tuple(trace["diagnostics_second"])
                                if trace.get("diagnostics_second") is not None else None),
            tokens_second=(tuple(trace["tokens_second"])
                           if trace.get("tokens_second") is not None else None),
            error=trace.get("error"),
        )


def example_id_for(dialogue_id: str, turn_index: int) -> str:
    return f"{dialogue_id}:{turn_index}"


def iter_training_examples(split: DatasetSplit, width: int) -> list[tuple[str, ExamplePayload]]:
    """Flatten a split into retrievable turns with gold previous states."""
    examples: list[tuple[str, ExamplePayload]] = []
    for dialogue in split.dialogues:
        prev = DialogueState()
        for turn in dialogue.turns:
            payload = ExamplePayload(
                dialogue_id=dialogue.dialogue_id,
                turn_index=turn.index,
                domains=dialogue.domains,
                prev_state=prev,
                ctx=context_window(dialogue, turn.index, width),
                gold_tlb=turn.gold_tlb,
            )
            examples.append((example_id_for(dialogue.dialogue_id, turn.index), payload))
            prev = turn.gold_state
    return examples


def _exemplar(payload: ExamplePayload, style: PromptStyle, schema: SchemaTable,
              with_hypothesis: bool) -> Exemplar:
    schema_local = schema.restricted_to(payload.domains) if style.is_sgd else None
    hypothesis = payload.hypothesis if with_hypothesis else None
    return Exemplar(payload.prev_state, payload.ctx, payload.gold_tlb, hypothesis, schema_local)


def _target_schema(schema: SchemaTable, style: PromptStyle, domains: Iterable[str]) -> SchemaTable:
    if not style.is_sgd:
        return schema
    wanted = set(domains) or set(schema.domain_names)
    return schema.restricted_to(wanted)


def _prompt_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def make_embedding_backend(spec: EmbeddingSpec) -> EmbeddingBackend:
    if spec.kind == "hash":
        return HashEmbeddingBackend(spec.dim, spec.seed)
    import os

    return HttpEmbeddingBackend(
        spec.base_url, spec.model, spec.dim,
        api_key=os.environ.get(spec.api_key_env),
    )


def make_backend(spec: BackendSpec, ledger: CostLedger, *,
                 golds: Mapping[str, TurnBelief] | None = None,
                 schema: SchemaTable | None = None,
                 noise_seed: int = 0,
                 backend_id: str | None = None) -> CompletionBackend:
    """Instantiate a backend from its spec.

    Record wrappers give their inner backend a private ledger so each real
    call is charged exactly once in the run ledger.
    """
    if spec.kind == "oracle_noise":
        return OracleNoiseBackend(
            golds or {}, spec.p, spec.seed if spec.seed is not None else noise_seed,
            schema=schema, ledger=ledger, params=spec.params,
            backend_id=backend_id or "oracle",
        )
    if spec.kind == "echo":
        return EchoHypothesisBackend(ledger, spec.params, backend_id or "echo")
    if spec.kind == "replay":
        return ReplayBackend(spec.path, ledger, spec.params, backend_id or "replay")
    if spec.kind == "record":
        inner = make_backend(spec.inner, CostLedger(), golds=golds, schema=schema,
                             noise_seed=noise_seed, backend_id=backend_id)
        return RecordBackend(inner, spec.path, ledger)
    config = HttpBackendConfig(
        base_url=spec.base_url, model=spec.model, api=spec.api,
        api_key_env=spec.api_key_env, timeout_s=spec.timeout_s,
        max_attempts=spec.max_attempts, max_concurrency=spec.max_concurrency,
        params=spec.params, backend_id=backend_id or "http",
    )
    return HttpBackend(config, ledger)


def first_pass_dialogue(dialogue: Dialogue, index: Index, backend: CompletionBackend,
                        embedder: EmbeddingBackend, schema: SchemaTable,
                        cfg: RunConfig) -> list[PredictionRecord]:
    """Sequential first pass over one dialogue, accumulating predicted state.

    A backend failure flags the failing turn and aborts the rest of the
    dialogue; records up to that point are preserved.
    """
    style = cfg.style.inference_variant()
    k, width = cfg.effective_k, cfg.effective_width
    target_schema = _target_schema(schema, style, dialogue.domains)
    records: list[PredictionRecord] = []
    state = DialogueState()
    for turn in dialogue.turns:
        ctx = context_window(dialogue, turn.index, width)
        query = embedder.embed(serialize_for_embedding(state, ctx))
        result = retrieve(index, query, k)
        exemplars = [_exemplar(e.payload, style, schema, with_hypothesis=False)
                     for e in result.entries()]
        prompt = build_inference_prompt(style, target_schema, exemplars, state, ctx,
                                        max_exemplars=k)
        tag = f"{dialogue.dialogue_id}:{turn.index}:first"
        record = PredictionRecord(
            dialogue_id=dialogue.dialogue_id,
            turn_index=turn.index,
            gold_tlb=turn.gold_tlb,
            gold_state=turn.gold_state,
            hyp_tlb_first=TurnBelief(),
            hyp_state_first=state,
            retrieval=tuple((e.example_id, score) for e, score in result.hits),
            prompt_digest_first=_prompt_digest(prompt.text),
            prompt_first=prompt.text if cfg.keep_prompts else None,
        )
        try:
            response = backend.complete(CompletionRequest(prompt.text, request_tag=tag))
            parsed = parse_tlb(response.text, strict=cfg.strict_parsing)
        except (BackendError, TlbParseError) as exc:
            record.error = f"first pass failed: {exc}"
            records.append(record)
            break
        state = aggregate_state(state, parsed.tlb)
        record.hyp_tlb_first = parsed.tlb
        record.hyp_state_first = state
        record.diagnostics_first = parsed.diagnostics
        record.tokens_first = (response.prompt_tokens, response.completion_tokens)
        records.append(record)
    return records


def second_pass_dialogue(records: Sequence[PredictionRecord], dialogue: Dialogue,
                         index: Index, backend: CompletionBackend,
                         schema: SchemaTable, cfg: RunConfig) -> list[PredictionRecord]:
    """Correct each turn using the pass-one retrieval, re-accumulating state.

    Every reused exemplar must carry a stored hypothesis; a missing one is a
    hard error naming the exemplar.
    """
    style = cfg.style.correction_variant()
    k = cfg.effective_k
    width = cfg.effective_width
    target_schema = _target_schema(schema, style, dialogue.domains)
    output: list[PredictionRecord] = []
    state = DialogueState()
    for record in sorted(records, key=lambda r: r.turn_index):
        if record.error:
            raise ValidationError(
                f"cannot correct {record.dialogue_id}:{record.turn_index}: "
                f"first pass was flagged: {record.error}"
            )
        exemplars = []
        for example_id, _score in record.retrieval:
            payload = index.entry(example_id).payload
            if payload.hypothesis is None:
                raise ValidationError(
                    f"exemplar {example_id!r} has no stored hypothesis; "
                    f"run demonstration collection first"
                )
            exemplars.append(_exemplar(payload, style, schema, with_hypothesis=True))
        ctx = context_window(dialogue, record.turn_index, width)
        prompt = build_correction_prompt(
            style, target_schema, exemplars, state, ctx, record.hyp_tlb_first,
            instruction=cfg.correction_instruction, max_exemplars=k,
        )
        tag = f"{record.dialogue_id}:{record.turn_index}:second"
        updated = dataclasses.replace(record)
        updated.prompt_digest_second = _prompt_digest(prompt.text)
        updated.prompt_second = prompt.text if cfg.keep_prompts else None
        try:
            response = backend.complete(CompletionRequest(prompt.text, request_tag=tag))
            parsed = parse_tlb(response.text, strict=cfg.strict_parsing)
        except (BackendError, TlbParseError) as exc:
            updated.error = f"second pass failed: {exc}"
            output.append(updated)
            break
        state = aggregate_state(state, parsed.tlb)
        updated.hyp_tlb_final = parsed.tlb
        updated.hyp_state_final = state
        updated.diagnostics_second = parsed.diagnostics
        updated.tokens_second = (response.prompt_tokens, response.completion_tokens)
        output.append(updated)
    return output


@dataclass(frozen=True)
class HypothesisRecord:
    example_id: str
    ok: bool
    tlb: TurnBelief | None
    diagnostics: tuple[str, ...]
    exemplar_ids: tuple[str, ...]
    error: str | None = None


@dataclass(frozen=True)
class CollectionResult:
    demo_ids: tuple[str, ...]
    hypotheses: Mapping[str, HypothesisRecord]

    def tlbs(self) -> dict[str, TurnBelief]:
        return {
            example_id: record.tlb
            for example_id, record in self.hypotheses.items()
            if record.ok and record.tlb is not None
        }


def collect_demonstrations(train: DatasetSplit, backend: CompletionBackend,
                           schema: SchemaTable, cfg: RunConfig) -> CollectionResult:
    """Predict a hypothesis for every training turn with 5 fixed demos.

    The demos are sampled once per run seed; a demo turn's own prompt
    contains only the other four. Failures are flagged per turn, never
    fatal.
    """
    style = cfg.style.inference_variant()
    width = cfg.effective_width
    examples = iter_training_examples(train, width)
    if len(examples) < FIXED_DEMO_COUNT:
        raise ValidationError(
            f"need at least {FIXED_DEMO_COUNT} training turns, got {len(examples)}"
        )
    by_id = dict(examples)
    ordered_ids = [example_id for example_id, _ in sorted(
        examples, key=lambda item: (item[1].dialogue_id, item[1].turn_index)
    )]
    rng = random.Random(cfg.seeds.demos)
    demo_ids = tuple(rng.sample(ordered_ids, FIXED_DEMO_COUNT))

    hypotheses: dict[str, HypothesisRecord] = {}
    for example_id, payload in sorted(examples, key=lambda item: item[0]):
        chosen = [d for d in demo_ids if d != example_id]
        exemplars = [_exemplar(by_id[d], style, schema, with_hypothesis=False) for d in chosen]
        target_schema = _target_schema(schema, style, payload.domains)
        prompt = build_inference_prompt(
            style, target_schema, exemplars, payload.prev_state, payload.ctx,
            max_exemplars=FIXED_DEMO_COUNT,
        )
        tag = f"{example_id}:collect"
        try:
            response = backend.complete(CompletionRequest(prompt.text, request_tag=tag))
            parsed = parse_tlb(response.text, strict=cfg.strict_parsing)
        except (BackendError, TlbParseError) as exc:
            hypotheses[example_id] = HypothesisRecord(
                example_id, False, None, (), tuple(chosen), error=str(exc)
            )
            continue
        hypotheses[example_id] = HypothesisRecord(
            example_id, True, parsed.tlb, parsed.diagnostics, tuple(chosen)
        )
    return CollectionResult(demo_ids, hypotheses)


@dataclass(frozen=True)
class ExportSummary:
    written: int
    skipped: int
    skipped_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"written": self.written, "skipped": self.skipped,
                "skipped_ids": list(self.skipped_ids)}


def export_training_sequences(train: DatasetSplit, collection: CollectionResult,
                              index: Index, embedder: EmbeddingBackend,
                              schema: SchemaTable, cfg: RunConfig,
                              path: str | Path) -> ExportSummary:
    """Write one correction-tuning sequence per training turn with a hypothesis.

    Exemplars are retrieved from the hypothesis-bearing part of the index,
    the turn itself excluded. Turns whose collection failed are counted as
    skipped, so written + skipped equals the training turn count.
    """
    style = cfg.style.correction_variant()
    k, width = cfg.effective_k, cfg.effective_width
    stored = collection.tlbs()
    usable = index.with_hypotheses(stored, keep_missing=False)
    examples = iter_training_examples(train, width)

    lines: list[str] = []
    skipped: list[str] = []
    for example_id, payload in sorted(examples, key=lambda item: item[0]):
        hyp = stored.get(example_id)
        if hyp is None:
            skipped.append(example_id)
            continue
        query = embedder.embed(serialize_for_embedding(payload.prev_state, payload.ctx))
        result = retrieve(usable, query, k, exclude={example_id})
        exemplars = [_exemplar(e.payload, style, schema, with_hypothesis=True)
                     for e in result.entries()]
        target_schema = _target_schema(schema, style, payload.domains)
        full_text, (start, end) = render_training_sequence(
            style, target_schema, exemplars, payload.prev_state, payload.ctx,
            hyp, payload.gold_tlb, max_exemplars=k,
        )
        lines.append(json.dumps({
            "example_id": example_id,
            "text": full_text,
            "target_start": start,
            "target_end": end,
            "meta": {"retrieved": list(result.ids()), "style": style.value},
        }, sort_keys=True, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return ExportSummary(len(lines), len(skipped), tuple(skipped))


def _run_per_dialogue(dialogues: Sequence[Dialogue], worker, max_concurrency: int) -> dict[str, list[PredictionRecord]]:
    results: dict[str, list[PredictionRecord]] = {}
    if max_concurrency <= 1 or len(dialogues) <= 1:
        for dialogue in dialogues:
            results[dialogue.dialogue_id] = worker(dialogue)
        return results
    with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
        futures = {d.dialogue_id: pool.submit(worker, d) for d in dialogues}
        for dialogue_id, future in futures.items():
            results[dialogue_id] = future.result()
    return results


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> None:
    ordered = sorted(records, key=lambda r: (r.dialogue_id, r.turn_index))
    lines = [json.dumps(r.to_json_dict(), sort_keys=True, ensure_ascii=False) for r in ordered]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"predictions file not found: {path}")
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(PredictionRecord.from_json_dict(json.loads(line)))
    return records


def load_synonyms(path: str | Path | None) -> SynonymTable:
    if path is None:
        return EMPTY_SYNONYMS
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return SynonymTable.from_dict(data)


@dataclass
class RunResult:
    predictions_path: Path
    report_first: MetricsReport
    report_final: MetricsReport | None
    ledger: CostLedger
    manifest: dict


class Manifest:
    """Stage-status record written after every stage boundary."""

    def __init__(self, cfg: RunConfig, path: Path):
        self.path = path
        self.data: dict = {
            "config_hash": cfg.config_hash(),
            "config": cfg.to_dict(),
            "decisions": {
                "collection_context": "gold previous state",
                "second_pass_retrieval": "reuse first pass",
                "second_pass_prev_state": "corrected prefix",
            },
            "stages": {},
            "incomplete": True,
        }

    def stage(self, name: str, status: str) -> None:
        self.data["stages"][name] = status
        self.write()

    def finish(self) -> None:
        self.data["incomplete"] = False
        self.write()

    def write(self) -> None:
        self.path.write_text(
            json.dumps(self.data, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )


def gold_tlb_map(*splits: DatasetSplit) -> dict[str, TurnBelief]:
    golds: dict[str, TurnBelief] = {}
    for split in splits:
        for dialogue in split.dialogues:
            for turn in dialogue.turns:
                golds[example_id_for(dialogue.dialogue_id, turn.index)] = turn.gold_tlb
    return golds


def run_experiment(cfg: RunConfig) -> RunResult:
    """Full pipeline: split, index, training factory, both passes, evaluation.

    Every stage failure is re-raised as a StageError naming the stage;
    whatever outputs exist by then are left on disk and the manifest is
    marked incomplete.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg, out / "MANIFEST.json")
    ledger = CostLedger()

    state: dict = {}

    def stage(name: str, fn) -> None:
        try:
            fn()
        except Exception as exc:
            manifest.stage(name, f"failed: {exc}")
            raise StageError(name, exc) from exc
        manifest.stage(name, "ok")

    def load_stage() -> None:
        state["schema"] = load_schema(cfg.schema_path)
        state["train_full"] = load_dataset(cfg.train_path, state["schema"],
                                           name="train", strict=cfg.strict_data)
        state["eval"] = load_dataset(cfg.eval_path, state["schema"],
                                     name="test", strict=cfg.strict_data)
        state["synonyms"] = load_synonyms(cfg.synonyms_path)

    def split_stage() -> None:
        state["train"] = sample_low_resource(state["train_full"], cfg.fraction, cfg.seeds.split)
        write_dataset(state["train"], out / "train_split.jsonl")

    def index_stage() -> None:
        state["embedder"] = make_embedding_backend(cfg.embedding)
        state["examples"] = iter_training_examples(state["train"], cfg.effective_width)
        state["index"] = build_index(state["examples"], state["embedder"])
        save_index(state["index"], out / "index.jsonl")

    def backends_stage() -> None:
        golds = gold_tlb_map(state["train"], state["eval"])
        state["inference"] = make_backend(
            cfg.inference_backend, ledger, golds=golds, schema=state["schema"],
            noise_seed=cfg.seeds.noise, backend_id="inference",
        )
        state["correction"] = make_backend(
            cfg.correction_backend, ledger, golds=golds, schema=state["schema"],
            noise_seed=cfg.seeds.noise, backend_id="correction",
        )

    def collect_stage() -> None:
        state["collection"] = collect_demonstrations(
            state["train"], state["inference"], state["schema"], cfg
        )
        write_collection(state["collection"], out / "hypotheses.jsonl", out / "demos.json")

    def export_stage() -> None:
        state["export"] = export_training_sequences(
            state["train"], state["collection"], state["index"], state["embedder"],
            state["schema"], cfg, out / "training_sequences.jsonl",
        )
        (out / "export_summary.json").write_text(
            json.dumps(state["export"].to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    def first_pass_stage() -> None:
        def worker(dialogue: Dialogue) -> list[PredictionRecord]:
            return first_pass_dialogue(dialogue, state["index"], state["inference"],
                                       state["embedder"], state["schema"], cfg)

        results = _run_per_dialogue(state["eval"].dialogues, worker, cfg.max_concurrency)
        records = [r for recs in results.values() for r in recs]
        write_predictions(records, out / "predictions_first.jsonl")
        state["first_records"] = results
        failed = sorted({r.dialogue_id for r in records if r.error})
        if failed:
            raise BackendError(f"first pass aborted for dialogues: {failed}")

    def second_pass_stage() -> None:
        if cfg.include_training_factory:
            hypotheses = state["collection"].tlbs()
        else:
            hypotheses = {}
        corrected_index = state["index"].with_hypotheses(hypotheses, keep_missing=True)
        by_id = {d.dialogue_id: d for d in state["eval"].dialogues}

        def worker(dialogue: Dialogue) -> list[PredictionRecord]:
            return second_pass_dialogue(
                state["first_records"][dialogue.dialogue_id], dialogue,
                corrected_index, state["correction"], state["schema"], cfg,
            )

        results = _run_per_dialogue(
            [by_id[d] for d in sorted(state["first_records"])], worker, cfg.max_concurrency
        )
        records = [r for recs in results.values() for r in recs]
        write_predictions(records, out / "predictions.jsonl")
        state["records"] = records
        failed = sorted({r.dialogue_id for r in records if r.error})
        if failed:
            raise BackendError(f"second pass aborted for dialogues: {failed}")

    def evaluate_stage() -> None:
        turn_records = [r.as_turn_record() for r in state["records"]]
        syn = state["synonyms"]
        state["report_first"] = evaluate_run(turn_records, syn, mode="first")
        dialogue_domains = {d.dialogue_id: d.domains for d in state["eval"].dialogues}
        if cfg.second_pass:
            state["report_final"] = breakdown_by_category(
                turn_records, dialogue_domains, state["train"].domain_set, syn, mode="final",
            )
        else:
            state["report_final"] = None
        report = {
            "first": state["report_first"].to_dict(),
            "final": state["report_final"].to_dict() if state["report_final"] else None,
        }
        (out / "report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        from .reporting import format_report

        (out / "report.txt").write_text(
            format_report(state["report_final"], ledger, style="table",
                          first=state["report_first"]) + "\n",
            encoding="utf-8",
        )
        (out / "ledger.json").write_text(
            json.dumps(ledger.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    stage("load", load_stage)
    stage("split", split_stage)
    stage("index", index_stage)
    stage("backends", backends_stage)
    if cfg.include_training_factory:
        stage("collect", collect_stage)
        stage("export-train", export_stage)
    stage("first-pass", first_pass_stage)
    if cfg.second_pass:
        stage("second-pass", second_pass_stage)
    else:
        state["records"] = [r for recs in state["first_records"].values() for r in recs]
        write_predictions(state["records"], out / "predictions.jsonl")
    stage("evaluate", evaluate_stage)
    manifest.finish()

    return RunResult(
        predictions_path=out / "predictions.jsonl",
        report_first=state["report_first"],
        report_final=state["report_final"],
        ledger=ledger,
        manifest=manifest.data,
    )


def write_collection(collection: CollectionResult, hypotheses_path: Path,
                     demos_path: Path) -> None:
    lines = []
    for example_id in sorted(collection.hypotheses):
        record = collection.hypotheses[example_id]
        lines.append(json.dumps({
            "example_id": record.example_id,
            "ok": record.ok,
            "tlb": record.tlb.to_dict() if record.tlb is not None else None,
            "diagnostics": list(record.diagnostics),
            "exemplar_ids": list(record.exemplar_ids),
            "error": record.error,
        }, sort_keys=True, ensure_ascii=False))
    hypotheses_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    demos_path.write_text(
        json.dumps({"demo_ids": list(collection.demo_ids)}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def load_collection(hypotheses_path: str | Path, demos_path: str | Path) -> CollectionResult:
    hypotheses_path = Path(hypotheses_path)
    demos_path = Path(demos_path)
    if not hypotheses_path.exists() or not demos_path.exists():
        raise ValidationError(
            f"collection outputs not found ({hypotheses_path}, {demos_path}); "
            f"run the collect stage first"
        )
    demo_ids = tuple(json.loads(demos_path.read_text(encoding="utf-8"))["demo_ids"])
    hypotheses: dict[str, HypothesisRecord] = {}
    for line in hypotheses_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        hypotheses[data["example_id"]] = HypothesisRecord(
            example_id=data["example_id"],
            ok=bool(data["ok"]),
            tlb=TurnBelief.from_dict(data["tlb"]) if data.get("tlb") is not None else None,
            diagnostics=tuple(data.get("diagnostics", [])),
            exemplar_ids=tuple(data.get("exemplar_ids", [])),
            error=data.get("error"),
        )
    return CollectionResult(demo_ids, hypotheses)


def export_pairs_for_split(train: DatasetSplit, cfg: RunConfig, path: str | Path) -> int:
    examples = iter_training_examples(train, cfg.effective_width)
    return export_retriever_pairs(examples, cfg.retriever_pairs_per_anchor,
                                  cfg.seeds.demos, path)
