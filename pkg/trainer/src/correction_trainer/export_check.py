"""Schema validation for the two exported JSONL contracts.

Training sequences:
    {"example_id": str, "text": str, "target_start": int, "target_end": int,
     "meta": {...}}
Retriever pairs:
    {"anchor_text": str, "candidate_text": str, "label": float in [0, 1]}

The file kind is detected from the first line's keys; a file must be
homogeneous. For sequences, the target span must slice cleanly out of the
text and parse as a belief list: "NONE" or "; "-joined "domain-slot: value"
items.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

_SEQUENCE_KEYS = {"example_id", "text", "target_start", "target_end", "meta"}
_PAIR_KEYS = {"anchor_text", "candidate_text", "label"}
_PAIR_RE = re.compile(
    r"^[a-z0-9_]+(?: [a-z0-9_]+)*-[a-z0-9_]+(?: [a-z0-9_]+)*: [^\n]+$"
)


class SchemaError(ValueError):
    def __init__(self, message: str, *, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class ExportReport:
    kind: str
    records: int
    errors: int = 0

    def __str__(self) -> str:
        noun = "sequences" if self.kind == "sequences" else "pairs"
        return f"{self.records} {noun}, {self.errors} errors"


def span_is_belief(span: str) -> bool:
    if span == "NONE":
        return True
    if not span:
        return False
    return all(_PAIR_RE.match(item) for item in span.split("; "))


def _check_sequence(record: dict, line: int, seen_ids: set[str]) -> None:
    if set(record) != _SEQUENCE_KEYS:
        raise SchemaError(
            f"expected keys {sorted(_SEQUENCE_KEYS)}, got {sorted(record)}", line=line
        )
    example_id = record["example_id"]
    if not isinstance(example_id, str) or not example_id:
        raise SchemaError("example_id must be a non-empty string", line=line)
    if example_id in seen_ids:
        raise SchemaError(f"duplicate example_id {example_id!r}", line=line)
    seen_ids.add(example_id)
    text = record["text"]
    if not isinstance(text, str) or not text:
        raise SchemaError("text must be a non-empty string", line=line)
    start, end = record["target_start"], record["target_end"]
    if not isinstance(start, int) or not isinstance(end, int):
        raise SchemaError("target offsets must be integers", line=line)
    if not 0 <= start < end <= len(text):
        raise SchemaError(
            f"target span [{start}, {end}) does not fit text of length {len(text)}",
            line=line,
        )
    if not isinstance(record["meta"], dict):
        raise SchemaError("meta must be an object", line=line)
    span = text[start:end]
    if not span_is_belief(span):
        raise SchemaError(f"target span does not parse as a belief: {span!r}", line=line)


def _check_pair(record: dict, line: int) -> None:
    if set(record) != _PAIR_KEYS:
        raise SchemaError(
            f"expected keys {sorted(_PAIR_KEYS)}, got {sorted(record)}", line=line
        )
    for key in ("anchor_text", "candidate_text"):
        if not isinstance(record[key], str) or not record[key]:
            raise SchemaError(f"{key} must be a non-empty string", line=line)
    label = record["label"]
    if not isinstance(label, (int, float)) or isinstance(label, bool):
        raise SchemaError("label must be a number", line=line)
    if not 0.0 <= float(label) <= 1.0:
        raise SchemaError(f"label {label} outside [0, 1]", line=line)


def validate_export(path: str | Path, verbose: bool = False) -> ExportReport:
    """Validate an exported file; raises SchemaError at the first violation."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"export file not found: {path}")
    kind: str | None = None
    seen_ids: set[str] = set()
    records = 0
    for line_number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg}", line=line_number) from None
        if not isinstance(record, dict):
            raise SchemaError("each line must be a JSON object", line=line_number)
        if kind is None:
            if set(record) == _SEQUENCE_KEYS:
                kind = "sequences"
            elif set(record) == _PAIR_KEYS:
                kind = "pairs"
            else:
                raise SchemaError(
                    f"unrecognized record shape with keys {sorted(record)}",
                    line=line_number,
                )
        if kind == "sequences":
            _check_sequence(record, line_number, seen_ids)
        else:
            _check_pair(record, line_number)
        records += 1
    if kind is None:
        raise SchemaError("file holds no records")
    report = ExportReport(kind, records)
    if verbose:
        print(report)
    return report
