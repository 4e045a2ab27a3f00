"""Evaluation: joint goal accuracy, slot F1, and domain-category breakdowns.

State-level metrics score the accumulated dialogue state at every turn;
turn-level metrics score each turn's belief on its own, which factors out
error propagation. Joint goal accuracy is 1 for a turn only when the
hypothesis matches the gold set exactly (under the synonym table); F1 gives
partial credit and is micro-averaged by pooling pair counts across turns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError
from .states import (
    DialogueState,
    SlotValuePair,
    TurnBelief,
    aggregate_state,
    normalize_value,
)


class SynonymTable:
    """Acceptable surface strings per (slot, gold value); gold always accepted."""

    def __init__(self, mapping: Mapping[tuple[str, str], Iterable[str]] | None = None):
        table: dict[tuple[str, str], frozenset[str]] = {}
        for (slot, gold), surfaces in (mapping or {}).items():
            key = (normalize_value(slot), normalize_value(gold))
            normalized = frozenset(normalize_value(s) for s in surfaces) | {key[1]}
            table[key] = normalized
        self._table = table

    def accepts(self, slot: str, gold_value: str, hyp_value: str) -> bool:
        if hyp_value == gold_value:
            return True
        return hyp_value in self._table.get((slot, gold_value), frozenset())

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Iterable[str]]]) -> "SynonymTable":
        mapping = {
            (slot, gold): list(surfaces)
            for slot, golds in data.items()
            for gold, surfaces in golds.items()
        }
        return cls(mapping)

    def __len__(self) -> int:
        return len(self._table)


EMPTY_SYNONYMS = SynonymTable()


def pair_matches(hyp: SlotValuePair, gold: SlotValuePair, syn: SynonymTable) -> bool:
    """True when the slots agree and the hypothesis value is an accepted surface."""
    return hyp.slot == gold.slot and syn.accepts(gold.slot, gold.value, hyp.value)


def _match_count(hyp_pairs: Iterable[SlotValuePair], gold_by_slot: Mapping[str, SlotValuePair],
                 syn: SynonymTable) -> int:
    return sum(
        1
        for pair in hyp_pairs
        if pair.slot in gold_by_slot and pair_matches(pair, gold_by_slot[pair.slot], syn)
    )


def _prf(matched: int, hyp_total: int, gold_total: int) -> tuple[float, float, float]:
    precision = matched / hyp_total if hyp_total else 1.0
    recall = matched / gold_total if gold_total else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def set_f1(hyp: Iterable[SlotValuePair], gold: Iterable[SlotValuePair],
           syn: SynonymTable = EMPTY_SYNONYMS) -> tuple[float, float, float]:
    """Precision, recall, F1 between two pair sets.

    Slots are unique keys, so matching is one-to-one by slot. Empty versus
    empty scores (1, 1, 1): the turn conveys nothing and the hypothesis
    agrees.
    """
    hyp_pairs = list(hyp)
    gold_by_slot = {p.slot: p for p in gold}
    matched = _match_count(hyp_pairs, gold_by_slot, syn)
    return _prf(matched, len(hyp_pairs), len(gold_by_slot))


def joint_goal(hyp: Iterable[SlotValuePair], gold: Iterable[SlotValuePair],
               syn: SynonymTable = EMPTY_SYNONYMS) -> int:
    """1 when slot keys coincide and every value is accepted, else 0."""
    hyp_pairs = list(hyp)
    gold_by_slot = {p.slot: p for p in gold}
    if {p.slot for p in hyp_pairs} != set(gold_by_slot):
        return 0
    return int(_match_count(hyp_pairs, gold_by_slot, syn) == len(gold_by_slot))


class DomainCategory(Enum):
    IN_DOMAIN = "in_domain"
    HALF_OOD = "half_ood"
    OOD = "ood"


def categorize_dialogue(dialogue_domains: Iterable[str], train_domains: Iterable[str]) -> DomainCategory:
    """In-domain if every dialogue domain was trained on, OOD if none was."""
    domains = set(dialogue_domains)
    if not domains:
        raise ValidationError("dialogue has an empty domain set")
    trained = set(train_domains)
    if domains <= trained:
        return DomainCategory.IN_DOMAIN
    if not domains & trained:
        return DomainCategory.OOD
    return DomainCategory.HALF_OOD


@dataclass(frozen=True)
class TurnRecord:
    """Per-turn evaluation inputs: gold annotations plus both hypothesis passes."""

    dialogue_id: str
    turn_index: int
    gold_tlb: TurnBelief
    gold_state: DialogueState
    hyp_tlb_first: TurnBelief
    hyp_tlb_final: TurnBelief | None = None
    hyp_state_final: DialogueState | None = None


@dataclass(frozen=True)
class MetricsReport:
    dst_jga: float
    dst_f1: float
    tlb_jga: float
    tlb_f1: float
    turn_count: int
    per_category: Mapping[str, "MetricsReport"] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for value in (self.dst_jga, self.dst_f1, self.tlb_jga, self.tlb_f1):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric out of [0, 1]: {value}")
        if self.per_category:
            total = sum(sub.turn_count for sub in self.per_category.values())
            if total != self.turn_count:
                raise ValueError(
                    f"category turn counts {total} do not sum to total {self.turn_count}"
                )

    def to_dict(self) -> dict:
        out: dict = {
            "dst_jga": self.dst_jga,
            "dst_f1": self.dst_f1,
            "tlb_jga": self.tlb_jga,
            "tlb_f1": self.tlb_f1,
            "turn_count": self.turn_count,
        }
        if self.per_category:
            out["per_category"] = {
                name: sub.to_dict() for name, sub in sorted(self.per_category.items())
            }
        return out


def _group_by_dialogue(records: Sequence[TurnRecord]) -> dict[str, list[TurnRecord]]:
    grouped: dict[str, list[TurnRecord]] = {}
    for record in records:
        grouped.setdefault(record.dialogue_id, []).append(record)
    for dialogue_id, turns in grouped.items():
        turns.sort(key=lambda r: r.turn_index)
        for expected, record in enumerate(turns, start=1):
            if record.turn_index != expected:
                raise ValidationError(
                    f"dialogue {dialogue_id!r}: missing turn {expected} "
                    f"(records must cover whole dialogues)"
                )
    return grouped


def _selected_tlb(record: TurnRecord, mode: str) -> TurnBelief:
    if mode == "first":
        return record.hyp_tlb_first
    if record.hyp_tlb_final is None:
        raise ValidationError(
            f"dialogue {record.dialogue_id!r} turn {record.turn_index}: "
            f"no final hypothesis; run the second pass or evaluate mode='first'"
        )
    return record.hyp_tlb_final


def evaluate_run(records: Sequence[TurnRecord], syn: SynonymTable = EMPTY_SYNONYMS,
                 mode: str = "final") -> MetricsReport:
    """Score a prediction run.

    State-level metrics compare per-turn accumulated hypothesis states with
    gold states; turn-level metrics compare the turn beliefs directly. The
    hypothesis states are re-accumulated from the selected pass's beliefs,
    dialogue by dialogue.
    """
    if mode not in ("first", "final"):
        raise ValidationError(f"mode must be 'first' or 'final', got {mode!r}")
    if not records:
        raise ValidationError("no records to evaluate")
    grouped = _group_by_dialogue(records)

    dst_hits = tlb_hits = total = 0
    dst_matched = dst_hyp = dst_gold = 0
    tlb_matched = tlb_hyp = tlb_gold = 0

    for turns in grouped.values():
        hyp_state = DialogueState()
        for record in turns:
            hyp_tlb = _selected_tlb(record, mode)
            hyp_state = aggregate_state(hyp_state, hyp_tlb)
            if mode == "final" and record.hyp_state_final is not None:
                if record.hyp_state_final != hyp_state:
                    raise ValidationError(
                        f"dialogue {record.dialogue_id!r} turn {record.turn_index}: stored "
                        f"final state does not equal the accumulated final turn beliefs"
                    )
            total += 1
            dst_hits += joint_goal(hyp_state, record.gold_state, syn)
            tlb_hits += joint_goal(hyp_tlb, record.gold_tlb, syn)

            gold_state_by_slot = {p.slot: p for p in record.gold_state}
            dst_matched += _match_count(hyp_state, gold_state_by_slot, syn)
            dst_hyp += len(hyp_state)
            dst_gold += len(gold_state_by_slot)

            gold_tlb_by_slot = {p.slot: p for p in record.gold_tlb}
            tlb_matched += _match_count(hyp_tlb, gold_tlb_by_slot, syn)
            tlb_hyp += len(hyp_tlb)
            tlb_gold += len(gold_tlb_by_slot)

    return MetricsReport(
        dst_jga=dst_hits / total,
        dst_f1=_prf(dst_matched, dst_hyp, dst_gold)[2],
        tlb_jga=tlb_hits / total,
        tlb_f1=_prf(tlb_matched, tlb_hyp, tlb_gold)[2],
        turn_count=total,
    )


def breakdown_by_category(records: Sequence[TurnRecord],
                          dialogue_domains: Mapping[str, Iterable[str]],
                          train_domains: Iterable[str],
                          syn: SynonymTable = EMPTY_SYNONYMS,
                          mode: str = "final") -> MetricsReport:
    """Overall report plus one sub-report per domain category.

    ``dialogue_domains`` maps each dialogue id to its domain set; a dialogue's
    category is inherited by all of its turns.
    """
    trained = set(train_domains)
    partitions: dict[str, list[TurnRecord]] = {}
    for record in records:
        if record.dialogue_id not in dialogue_domains:
            raise ValidationError(f"unknown dialogue_id {record.dialogue_id!r}")
        category = categorize_dialogue(dialogue_domains[record.dialogue_id], trained)
        partitions.setdefault(category.value, []).append(record)

    overall = evaluate_run(records, syn, mode)
    per_category = {
        name: evaluate_run(part, syn, mode) for name, part in partitions.items()
    }
    return MetricsReport(
        dst_jga=overall.dst_jga,
        dst_f1=overall.dst_f1,
        tlb_jga=overall.tlb_jga,
        tlb_f1=overall.tlb_f1,
        turn_count=overall.turn_count,
        per_category=per_category,
    )
