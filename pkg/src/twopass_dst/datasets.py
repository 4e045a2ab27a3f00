"""Dataset loading, validation, and low-resource splitting.

Datasets are JSONL, one dialogue per line:

    {"dialogue_id": str, "domains": [str], "turns": [
        {"system": str, "user": str,
         "tlb": {"domain-slot": "value"}, "state": {"domain-slot": "value"}}]}

Loading normalizes every value, checks each annotated slot against the
schema, and verifies that the stored states equal the accumulation of the
turn beliefs. Inconsistencies surface as warnings by default, or as hard
errors in strict mode.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConsistencyError, DataFormatError, UnknownSlotError, ValidationError
from .schema import SchemaTable
from .states import Dialogue, DialogueState, Turn, TurnBelief, accumulate

_SPLIT_NAMES = ("train", "dev", "test")


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    dialogues: tuple[Dialogue, ...]
    domain_set: frozenset[str]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if self.name not in _SPLIT_NAMES:
            raise ValueError(f"split name must be one of {_SPLIT_NAMES}, got {self.name!r}")
        ids = [d.dialogue_id for d in self.dialogues]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate dialogue ids: {dupes}")
        observed = frozenset().union(*(d.domains for d in self.dialogues)) if self.dialogues else frozenset()
        if self.domain_set != observed:
            raise ValueError("domain_set does not match the domains of the dialogues")

    @classmethod
    def build(cls, name: str, dialogues: tuple[Dialogue, ...] | list[Dialogue],
              warnings: tuple[str, ...] = ()) -> "DatasetSplit":
        dialogues = tuple(dialogues)
        domains = frozenset().union(*(d.domains for d in dialogues)) if dialogues else frozenset()
        return cls(name, dialogues, domains, warnings)

    def turn_count(self) -> int:
        return sum(len(d.turns) for d in self.dialogues)


def _parse_pairs(raw: object, *, what: str, path: str, line: int) -> dict[str, str]:
    if not isinstance(raw, dict):
        raise DataFormatError(f"{what} must be an object of slot -> value", path=path, line=line)
    return {str(k): str(v) for k, v in raw.items()}


def load_dataset(path: str | Path, schema: SchemaTable, *,
                 name: str = "train", strict: bool = False) -> DatasetSplit:
    """Load and validate one JSONL dataset file.

    Unknown slots and malformed lines are always hard errors. State/TLB
    inconsistencies and domain-list mismatches are collected as warnings
    unless ``strict`` is set, in which case they raise ConsistencyError.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"dataset file not found: {path}") from None

    dialogues: list[Dialogue] = []
    seen_ids: set[str] = set()
    warnings: list[str] = []

    def inconsistency(message: str) -> None:
        if strict:
            raise ConsistencyError(message)
        warnings.append(message)

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc.msg}", path=str(path), line=lineno) from None
        if not isinstance(record, dict):
            raise DataFormatError("each line must be a JSON object", path=str(path), line=lineno)
        unknown = set(record) - {"dialogue_id", "domains", "turns"}
        if unknown:
            raise DataFormatError(f"unknown keys {sorted(unknown)}", path=str(path), line=lineno)
        try:
            dialogue_id = str(record["dialogue_id"])
            declared_domains = frozenset(str(d) for d in record["domains"])
            raw_turns = record["turns"]
        except KeyError as exc:
            raise DataFormatError(f"missing key {exc.args[0]!r}", path=str(path), line=lineno) from None
        if not isinstance(raw_turns, list) or not raw_turns:
            raise DataFormatError("turns must be a non-empty array", path=str(path), line=lineno)

        turns: list[Turn] = []
        for idx, raw_turn in enumerate(raw_turns, start=1):
            if not isinstance(raw_turn, dict):
                raise DataFormatError(f"turn {idx} must be an object", path=str(path), line=lineno)
            missing = {"system", "user", "tlb", "state"} - set(raw_turn)
            if missing:
                raise DataFormatError(
                    f"turn {idx} is missing keys {sorted(missing)}", path=str(path), line=lineno
                )
            tlb_pairs = _parse_pairs(raw_turn["tlb"], what="tlb", path=str(path), line=lineno)
            state_pairs = _parse_pairs(raw_turn["state"], what="state", path=str(path), line=lineno)
            try:
                tlb = TurnBelief.from_dict(tlb_pairs)
                state = DialogueState.from_dict(state_pairs)
            except ValueError as exc:
                raise DataFormatError(
                    f"turn {idx}: {exc}", path=str(path), line=lineno
                ) from None
            for pair in list(tlb) + list(state):
                if not schema.has_slot(pair.slot):
                    raise UnknownSlotError(pair.slot, path=str(path), line=lineno)
            turns.append(Turn(idx, str(raw_turn["system"]), str(raw_turn["user"]), tlb, state))

        accumulated = accumulate(t.gold_tlb for t in turns)
        for turn, expected in zip(turns, accumulated):
            if turn.gold_state != expected:
                inconsistency(
                    f"{dialogue_id} turn {turn.index}: stored gold state "
                    f"{turn.gold_state.to_dict()} differs from accumulated "
                    f"turn beliefs {expected.to_dict()}"
                )
        observed_domains = frozenset(p.domain for t in turns for p in t.gold_state)
        if declared_domains != observed_domains:
            inconsistency(
                f"{dialogue_id}: declared domains {sorted(declared_domains)} differ "
                f"from domains observed in gold states {sorted(observed_domains)}"
            )
        if dialogue_id in seen_ids:
            raise DataFormatError(
                f"duplicate dialogue_id {dialogue_id!r}", path=str(path), line=lineno
            )
        seen_ids.add(dialogue_id)
        dialogues.append(Dialogue(dialogue_id, observed_domains, tuple(turns)))

    return DatasetSplit.build(name, dialogues, tuple(warnings))


def sample_low_resource(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """Select ceil(fraction * N) whole dialogues, uniformly, deterministically."""
    if not split.dialogues:
        raise ValidationError("cannot sample from an empty split")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    total = len(split.dialogues)
    count = math.ceil(fraction * total)
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(total), count))
    return DatasetSplit.build(split.name, tuple(split.dialogues[i] for i in chosen))


def dialogue_to_record(dialogue: Dialogue) -> dict:
    return {
        "dialogue_id": dialogue.dialogue_id,
        "domains": sorted(dialogue.domains),
        "turns": [
            {
                "system": t.system_utterance,
                "user": t.user_utterance,
                "tlb": t.gold_tlb.to_dict(),
                "state": t.gold_state.to_dict(),
            }
            for t in dialogue.turns
        ],
    }


def write_dataset(split: DatasetSplit, path: str | Path) -> None:
    """Write a split back to canonical JSONL (sorted keys, LF endings)."""
    path = Path(path)
    lines = [
        json.dumps(dialogue_to_record(d), sort_keys=True, ensure_ascii=False)
        for d in split.dialogues
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
