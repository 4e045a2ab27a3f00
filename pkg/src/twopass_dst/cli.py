"""Command-line interface: one subcommand per pipeline stage plus "run".

Configuration precedence is config file < environment < flags. Environment
overrides use the ``TWOPASS_DST_`` prefix with the config key upper-cased
(``TWOPASS_DST_K=3``); seeds are ``TWOPASS_DST_SEED_SPLIT`` and friends.
Exit codes: 0 success, 1 validation or configuration error, 2 runtime or
backend error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

from .backends import CostLedger
from .datasets import load_dataset, sample_low_resource, write_dataset
from .errors import (
    ConfigError,
    StageDependencyError,
    StageError,
    TwopassError,
    ValidationError,
)
from .metrics import breakdown_by_category, evaluate_run
from .pipeline import (
    BackendSpec,
    EmbeddingSpec,
    Manifest,
    PredictionRecord,
    RunConfig,
    Seeds,
    build_index,
    collect_demonstrations,
    export_pairs_for_split,
    export_training_sequences,
    first_pass_dialogue,
    gold_tlb_map,
    iter_training_examples,
    load_collection,
    load_predictions,
    load_synonyms,
    make_backend,
    make_embedding_backend,
    run_experiment,
    second_pass_dialogue,
    write_collection,
    write_predictions,
    _run_per_dialogue,
)
from .prompts import PromptStyle
from .reporting import format_report
from .retrieval import load_index, save_index
from .schema import load_schema

_ENV_PREFIX = "TWOPASS_DST_"

_SCALAR_KEYS = {
    "schema_path": str,
    "train_path": str,
    "eval_path": str,
    "output_dir": str,
    "style": str,
    "k": int,
    "context_width": int,
    "fraction": float,
    "strict_parsing": bool,
    "strict_data": bool,
    "max_concurrency": int,
    "correction_instruction": str,
    "synonyms_path": str,
    "include_training_factory": bool,
    "second_pass": bool,
    "retriever_pairs_per_anchor": int,
}

_REQUIRED_KEYS = ("schema_path", "train_path", "eval_path", "output_dir", "style", "seeds")

_ALL_KEYS = set(_SCALAR_KEYS) | {"seeds", "backends"}


def _coerce(key: str, value, target):
    if value is None:
        return None
    if target is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes"):
            return True
        if str(value).lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {value!r}")
    try:
        return target(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r}: expected {target.__name__}, got {value!r}") from None


def _style(value: str) -> PromptStyle:
    try:
        return PromptStyle(value)
    except ValueError:
        names = ", ".join(s.value for s in PromptStyle)
        raise ConfigError(f"key 'style': must be one of {names}, got {value!r}") from None


def load_config(path: str | Path | None, overrides: Mapping[str, object] | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Merge config file, environment, and flag overrides into a RunConfig."""
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")

    unknown = set(data) - _ALL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    for key, target in _SCALAR_KEYS.items():
        env_value = env.get(_ENV_PREFIX + key.upper())
        if env_value is not None:
            data[key] = _coerce(key, env_value, target)
    seeds = dict(data.get("seeds") or {})
    for seed_name in ("split", "demos", "noise"):
        env_value = env.get(f"{_ENV_PREFIX}SEED_{seed_name.upper()}")
        if env_value is not None:
            seeds[seed_name] = _coerce(f"seeds.{seed_name}", env_value, int)
    if seeds:
        data["seeds"] = seeds

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        data[key] = value

    missing = [key for key in _REQUIRED_KEYS if key not in data or data[key] in (None, {})]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")

    raw_seeds = data["seeds"]
    unknown_seeds = set(raw_seeds) - {"split", "demos", "noise"}
    if unknown_seeds:
        raise ConfigError(f"unknown seed keys: {sorted(unknown_seeds)}")
    missing_seeds = [name for name in ("split", "demos", "noise") if name not in raw_seeds]
    if missing_seeds:
        raise ConfigError(f"missing seeds: {missing_seeds} (all seeds must be explicit)")

    backends = dict(data.get("backends") or {})
    unknown_backends = set(backends) - {"inference", "correction", "embedding"}
    if unknown_backends:
        raise ConfigError(f"unknown backend roles: {sorted(unknown_backends)}")
    inference = BackendSpec.from_dict(backends.get("inference") or {"kind": "oracle_noise"})
    correction = BackendSpec.from_dict(backends.get("correction") or {"kind": "oracle_noise"})
    embedding = EmbeddingSpec.from_dict(backends.get("embedding") or {})

    base = Path(path).parent if path is not None else Path.cwd()

    def absolute(p: str | None) -> str | None:
        if p is None:
            return None
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else (base / candidate).resolve())

    kwargs = {key: _coerce(key, data[key], target)
              for key, target in _SCALAR_KEYS.items() if key in data}
    kwargs["style"] = _style(kwargs["style"])
    for path_key in ("schema_path", "train_path", "eval_path", "output_dir", "synonyms_path"):
        if kwargs.get(path_key) is not None:
            kwargs[path_key] = absolute(kwargs[path_key])
    return RunConfig(
        seeds=Seeds(int(raw_seeds["split"]), int(raw_seeds["demos"]), int(raw_seeds["noise"])),
        inference_backend=inference,
        correction_backend=correction,
        embedding=embedding,
        **kwargs,
    )


def _wrap_backends(cfg: RunConfig, record: str | None, replay: str | None) -> RunConfig:
    """Apply --record / --replay to both completion backends."""
    import dataclasses

    if record and replay:
        raise ConfigError("--record and --replay are mutually exclusive")
    if not record and not replay:
        return cfg
    directory = Path(record or replay)
    directory.mkdir(parents=True, exist_ok=True)
    if record:
        inference = BackendSpec(kind="record", path=str(directory / "inference.jsonl"),
                                inner=cfg.inference_backend)
        correction = BackendSpec(kind="record", path=str(directory / "correction.jsonl"),
                                 inner=cfg.correction_backend)
    else:
        inference = BackendSpec(kind="replay", path=str(directory / "inference.jsonl"),
                                params=cfg.inference_backend.params)
        correction = BackendSpec(kind="replay", path=str(directory / "correction.jsonl"),
                                 params=cfg.correction_backend.params)
    return dataclasses.replace(cfg, inference_backend=inference, correction_backend=correction)


class _Workspace:
    """Shared stage plumbing: loads inputs lazily and checks dependencies."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.schema = load_schema(cfg.schema_path)
        self.ledger = CostLedger()

    def eval_split(self):
        return load_dataset(self.cfg.eval_path, self.schema, name="test",
                            strict=self.cfg.strict_data)

    def train_split(self):
        path = self.out / "train_split.jsonl"
        if not path.exists():
            raise StageDependencyError(
                f"{path} not found; run the 'split' stage first"
            )
        return load_dataset(path, self.schema, name="train", strict=self.cfg.strict_data)

    def examples(self, split):
        return iter_training_examples(split, self.cfg.effective_width)

    def index(self, split):
        path = self.out / "index.jsonl"
        if not path.exists():
            raise StageDependencyError(f"{path} not found; run the 'index' stage first")
        payloads = dict(self.examples(split))
        return load_index(path, payloads)

    def embedder(self):
        return make_embedding_backend(self.cfg.embedding)

    def backend(self, spec: BackendSpec, role: str, *splits):
        golds = gold_tlb_map(*splits)
        return make_backend(spec, self.ledger, golds=golds, schema=self.schema,
                            noise_seed=self.cfg.seeds.noise, backend_id=role)

    def collection(self):
        return load_collection(self.out / "hypotheses.jsonl", self.out / "demos.json")

    def manifest(self) -> Manifest:
        manifest = Manifest(self.cfg, self.out / "MANIFEST.json")
        existing = self.out / "MANIFEST.json"
        if existing.exists():
            try:
                manifest.data = json.loads(existing.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                pass
        return manifest


def _cmd_split(ws: _Workspace) -> None:
    full = load_dataset(ws.cfg.train_path, ws.schema, name="train", strict=ws.cfg.strict_data)
    for warning in full.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    sampled = sample_low_resource(full, ws.cfg.fraction, ws.cfg.seeds.split)
    write_dataset(sampled, ws.out / "train_split.jsonl")
    ws.manifest().stage("split", "ok")
    print(f"split: kept {len(sampled.dialogues)} of {len(full.dialogues)} dialogues "
          f"({sampled.turn_count()} turns)")


def _cmd_index(ws: _Workspace) -> None:
    train = ws.train_split()
    index = build_index(ws.examples(train), ws.embedder())
    save_index(index, ws.out / "index.jsonl")
    ws.manifest().stage("index", "ok")
    print(f"index: {len(index)} entries, dim {index.dim}")


def _cmd_collect(ws: _Workspace) -> None:
    train = ws.train_split()
    backend = ws.backend(ws.cfg.inference_backend, "inference", train)
    collection = collect_demonstrations(train, backend, ws.schema, ws.cfg)
    write_collection(collection, ws.out / "hypotheses.jsonl", ws.out / "demos.json")
    ws.manifest().stage("collect", "ok")
    failures = sum(1 for record in collection.hypotheses.values() if not record.ok)
    print(f"collect: {len(collection.hypotheses)} turns, {failures} failures, "
          f"demos {list(collection.demo_ids)}")


def _cmd_export_train(ws: _Workspace) -> None:
    train = ws.train_split()
    summary = export_training_sequences(
        train, ws.collection(), ws.index(train), ws.embedder(), ws.schema, ws.cfg,
        ws.out / "training_sequences.jsonl",
    )
    (ws.out / "export_summary.json").write_text(
        json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    ws.manifest().stage("export-train", "ok")
    print(f"export-train: wrote {summary.written}, skipped {summary.skipped}")


def _cmd_export_retriever_pairs(ws: _Workspace) -> None:
    train = ws.train_split()
    count = export_pairs_for_split(train, ws.cfg, ws.out / "retriever_pairs.jsonl")
    ws.manifest().stage("export-retriever-pairs", "ok")
    print(f"export-retriever-pairs: wrote {count} pairs")


def _cmd_first_pass(ws: _Workspace) -> None:
    train = ws.train_split()
    eval_split = ws.eval_split()
    index = ws.index(train)
    embedder = ws.embedder()
    backend = ws.backend(ws.cfg.inference_backend, "inference", train, eval_split)

    def worker(dialogue):
        return first_pass_dialogue(dialogue, index, backend, embedder, ws.schema, ws.cfg)

    results = _run_per_dialogue(eval_split.dialogues, worker, ws.cfg.max_concurrency)
    records = [r for recs in results.values() for r in recs]
    write_predictions(records, ws.out / "predictions_first.jsonl")
    failed = sorted({r.dialogue_id for r in records if r.error})
    if failed:
        ws.manifest().stage("first-pass", f"failed: dialogues aborted: {failed}")
        raise StageError("first-pass", TwopassError(f"dialogues aborted: {failed}"))
    ws.manifest().stage("first-pass", "ok")
    print(f"first-pass: {len(records)} turns predicted")


def _cmd_second_pass(ws: _Workspace) -> None:
    first_path = ws.out / "predictions_first.jsonl"
    if not first_path.exists():
        raise StageDependencyError(f"{first_path} not found; run 'first-pass' first")
    train = ws.train_split()
    eval_split = ws.eval_split()
    collection = ws.collection()
    index = ws.index(train).with_hypotheses(collection.tlbs(), keep_missing=True)
    backend = ws.backend(ws.cfg.correction_backend, "correction", train, eval_split)
    records = load_predictions(first_path)
    grouped: dict[str, list[PredictionRecord]] = {}
    for record in records:
        grouped.setdefault(record.dialogue_id, []).append(record)
    by_id = {d.dialogue_id: d for d in eval_split.dialogues}

    def worker(dialogue):
        return second_pass_dialogue(grouped[dialogue.dialogue_id], dialogue, index,
                                    backend, ws.schema, ws.cfg)

    results = _run_per_dialogue(
        [by_id[d] for d in sorted(grouped)], worker, ws.cfg.max_concurrency
    )
    corrected = [r for recs in results.values() for r in recs]
    write_predictions(corrected, ws.out / "predictions.jsonl")
    failed = sorted({r.dialogue_id for r in corrected if r.error})
    if failed:
        ws.manifest().stage("second-pass", f"failed: dialogues aborted: {failed}")
        raise StageError("second-pass", TwopassError(f"dialogues aborted: {failed}"))
    ws.manifest().stage("second-pass", "ok")
    print(f"second-pass: {len(corrected)} turns corrected")


def _cmd_evaluate(ws: _Workspace) -> None:
    path = ws.out / "predictions.jsonl"
    mode = "final"
    if not path.exists():
        path = ws.out / "predictions_first.jsonl"
        mode = "first"
    if not path.exists():
        raise StageDependencyError("no predictions found; run 'first-pass' (and 'second-pass') first")
    records = [r.as_turn_record() for r in load_predictions(path)]
    syn = load_synonyms(ws.cfg.synonyms_path)
    train = ws.train_split()
    eval_split = ws.eval_split()
    dialogue_domains = {d.dialogue_id: d.domains for d in eval_split.dialogues}
    report_first = evaluate_run(records, syn, mode="first")
    report_final = None
    if mode == "final":
        report_final = breakdown_by_category(records, dialogue_domains,
                                             train.domain_set, syn, mode="final")
    payload = {
        "first": report_first.to_dict(),
        "final": report_final.to_dict() if report_final else None,
    }
    (ws.out / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    text = format_report(report_final, None, style="table", first=report_first)
    (ws.out / "report.txt").write_text(text + "\n", encoding="utf-8")
    ws.manifest().stage("evaluate", "ok")
    print(text)


def _cmd_report(ws: _Workspace, style: str) -> None:
    path = ws.out / "report.json"
    if not path.exists():
        raise StageDependencyError(f"{path} not found; run 'evaluate' first")
    if style == "json":
        print(path.read_text(encoding="utf-8").rstrip("\n"))
        return
    text_path = ws.out / "report.txt"
    if text_path.exists():
        print(text_path.read_text(encoding="utf-8").rstrip("\n"))
    else:
        print(path.read_text(encoding="utf-8").rstrip("\n"))


def _cmd_run(cfg: RunConfig) -> None:
    result = run_experiment(cfg)
    print(format_report(result.report_final, result.ledger, style="table",
                        first=result.report_first))
    print(f"\npredictions: {result.predictions_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twopass-dst",
        description="Two-pass dialogue state tracking pipeline.",
    )
    parser.add_argument("--config", help="path to the JSON config file")
    parser.add_argument("--schema-path")
    parser.add_argument("--train-path")
    parser.add_argument("--eval-path")
    parser.add_argument("--output-dir")
    parser.add_argument("--style", choices=[s.value for s in PromptStyle])
    parser.add_argument("--k", type=int)
    parser.add_argument("--context-width", type=int)
    parser.add_argument("--fraction", type=float)
    parser.add_argument("--max-concurrency", type=int)
    parser.add_argument("--strict-parsing", action="store_const", const=True)
    parser.add_argument("--strict-data", action="store_const", const=True)
    parser.add_argument("--synonyms-path")
    parser.add_argument("--correction-instruction")
    parser.add_argument("--record", metavar="DIR",
                        help="wrap completion backends, recording to DIR")
    parser.add_argument("--replay", metavar="DIR",
                        help="serve completions from recordings in DIR")
    parser.add_argument(
        "command",
        choices=["split", "index", "collect", "export-train", "export-retriever-pairs",
                 "first-pass", "second-pass", "evaluate", "report", "run"],
    )
    parser.add_argument("--report-style", choices=["table", "json"], default="table")
    return parser


def dispatch(command: str, cfg: RunConfig, report_style: str = "table") -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        if command == "run":
            _cmd_run(cfg)
            return 0
        ws = _Workspace(cfg)
        handlers = {
            "split": lambda: _cmd_split(ws),
            "index": lambda: _cmd_index(ws),
            "collect": lambda: _cmd_collect(ws),
            "export-train": lambda: _cmd_export_train(ws),
            "export-retriever-pairs": lambda: _cmd_export_retriever_pairs(ws),
            "first-pass": lambda: _cmd_first_pass(ws),
            "second-pass": lambda: _cmd_second_pass(ws),
            "evaluate": lambda: _cmd_evaluate(ws),
            "report": lambda: _cmd_report(ws, report_style),
        }
        handlers[command]()
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TwopassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {
        "schema_path": args.schema_path,
        "train_path": args.train_path,
        "eval_path": args.eval_path,
        "output_dir": args.output_dir,
        "style": args.style,
        "k": args.k,
        "context_width": args.context_width,
        "fraction": args.fraction,
        "max_concurrency": args.max_concurrency,
        "strict_parsing": args.strict_parsing,
        "strict_data": args.strict_data,
        "synonyms_path": args.synonyms_path,
        "correction_instruction": args.correction_instruction,
    }
    try:
        cfg = load_config(args.config, overrides)
        cfg = _wrap_backends(cfg, args.record, args.replay)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return dispatch(args.command, cfg, args.report_style)
    except KeyboardInterrupt:
        # Stage outputs and the manifest are flushed at stage boundaries, so
        # whatever completed before the interrupt is already on disk.
        print("interrupted; partial outputs and MANIFEST are on disk", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
