"""Dialogue data model: slot-value pairs, turn beliefs, states, and turns.

A turn belief holds the slot-value pairs newly introduced or changed at one
turn; a dialogue state is the cumulative set after aggregating turn beliefs
over the dialogue so far. The reserved value ``[DELETE]`` inside a turn
belief removes a slot from the accumulated state and is never allowed inside
a state itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

DELETE_VALUE = "[DELETE]"

_WS_RE = re.compile(r"\s+")
_SLOT_RE = re.compile(r"^[a-z0-9_]+(?: [a-z0-9_]+)*-[a-z0-9_]+(?: [a-z0-9_]+)*$")


def normalize_value(raw: str) -> str:
    """Lowercase, trim, and collapse whitespace runs to single spaces.

    Idempotent on its output. Raises ValueError when nothing is left.
    """
    out = _WS_RE.sub(" ", raw).strip().lower()
    if not out:
        raise ValueError(f"value is empty after normalization: {raw!r}")
    return out


@dataclass(frozen=True, order=True)
class SlotValuePair:
    """One ``domain-slot: value`` assignment, normalized at construction.

    The slot must be a lowercase ``domain-name`` token with exactly one
    hyphen. Values are normalized; the delete sentinel is canonicalized to
    ``[DELETE]``. Values may not contain the ``"; "`` pair separator, which
    keeps the rendered surface form parseable.
    """

    slot: str
    value: str

    def __post_init__(self) -> None:
        slot = normalize_value(self.slot)
        if not _SLOT_RE.match(slot):
            raise ValueError(f"slot must look like 'domain-name': {self.slot!r}")
        value = normalize_value(self.value)
        if value == DELETE_VALUE.lower():
            value = DELETE_VALUE
        elif "; " in value:
            raise ValueError(f"value may not contain the pair separator '; ': {self.value!r}")
        object.__setattr__(self, "slot", slot)
        object.__setattr__(self, "value", value)

    @property
    def domain(self) -> str:
        return self.slot.split("-", 1)[0]

    @property
    def is_delete(self) -> bool:
        return self.value == DELETE_VALUE


class _SlotMap:
    """Immutable slot -> pair mapping with canonical (lexicographic) order."""

    __slots__ = ("_map",)
    _allow_delete = False

    def __init__(self, pairs: Iterable[SlotValuePair | tuple[str, str]] = ()):
        mapping: dict[str, SlotValuePair] = {}
        for item in pairs:
            pair = item if isinstance(item, SlotValuePair) else SlotValuePair(*item)
            if pair.slot in mapping:
                raise ValueError(f"duplicate slot {pair.slot!r}")
            if pair.is_delete and not self._allow_delete:
                raise ValueError(f"{DELETE_VALUE} is not allowed in a {type(self).__name__}")
            mapping[pair.slot] = pair
        self._map = dict(sorted(mapping.items()))

    @classmethod
    def from_dict(cls, data: Mapping[str, str]):
        return cls(SlotValuePair(slot, value) for slot, value in data.items())

    @property
    def pairs(self) -> tuple[SlotValuePair, ...]:
        return tuple(self._map.values())

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(self._map)

    def get(self, slot: str) -> str | None:
        pair = self._map.get(slot)
        return pair.value if pair is not None else None

    def to_dict(self) -> dict[str, str]:
        return {slot: pair.value for slot, pair in self._map.items()}

    def __contains__(self, slot: object) -> bool:
        return slot in self._map

    def __len__(self) -> int:
        return len(self._map)

    def __bool__(self) -> bool:
        return bool(self._map)

    def __iter__(self) -> Iterator[SlotValuePair]:
        return iter(self._map.values())

    def __eq__(self, other: object) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        return self._map == other._map

    def __hash__(self) -> int:
        return hash((type(self).__name__, self.pairs))

    def __repr__(self) -> str:
        inner = ", ".join(f"{p.slot}: {p.value}" for p in self.pairs)
        return f"{type(self).__name__}({{{inner}}})"


class TurnBelief(_SlotMap):
    """Slot-value pairs asserted at a single turn; may carry [DELETE] values."""

    _allow_delete = True


class DialogueState(_SlotMap):
    """Cumulative slot-value pairs; never contains [DELETE] values."""

    _allow_delete = False


def aggregate_state(prev: DialogueState, tlb: TurnBelief) -> DialogueState:
    """Fold one turn belief into a state.

    ``[DELETE]`` removes the slot, any other value inserts or overwrites, and
    untouched slots carry over.
    """
    merged = prev.to_dict()
    for pair in tlb:
        if pair.is_delete:
            merged.pop(pair.slot, None)
        else:
            merged[pair.slot] = pair.value
    return DialogueState.from_dict(merged)


def accumulate(tlbs: Iterable[TurnBelief]) -> list[DialogueState]:
    """States after each turn belief, starting from the empty state."""
    states: list[DialogueState] = []
    current = DialogueState()
    for tlb in tlbs:
        current = aggregate_state(current, tlb)
        states.append(current)
    return states


@dataclass(frozen=True)
class Turn:
    """One exchange: the system reply that preceded the user utterance.

    ``index`` is 1-based; at the first turn the system utterance is the
    empty string because no system turn has happened yet.
    """

    index: int
    system_utterance: str
    user_utterance: str
    gold_tlb: TurnBelief
    gold_state: DialogueState


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    domains: frozenset[str]
    turns: tuple[Turn, ...]

    def __post_init__(self) -> None:
        for expected, turn in enumerate(self.turns, start=1):
            if turn.index != expected:
                raise ValueError(
                    f"dialogue {self.dialogue_id!r}: turn indices must run 1..n, "
                    f"got {turn.index} at position {expected}"
                )
        observed = frozenset(
            pair.domain for turn in self.turns for pair in turn.gold_state
        )
        if self.domains != observed:
            raise ValueError(
                f"dialogue {self.dialogue_id!r}: domains {sorted(self.domains)} do not "
                f"match domains observed in gold states {sorted(observed)}"
            )


@dataclass(frozen=True)
class ContextWindow:
    """The last ``w`` (system, user) exchanges ending at the current turn.

    Exchanges before the dialogue start are padded with empty strings.
    """

    exchanges: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if not self.exchanges:
            raise ValueError("context window must hold at least one exchange")

    @property
    def width(self) -> int:
        return len(self.exchanges)


def context_window(dialogue: Dialogue, turn_index: int, width: int) -> ContextWindow:
    """Exchanges ``turn_index - width + 1 .. turn_index``, padded at the start."""
    if width < 1:
        raise ValueError(f"context width must be >= 1, got {width}")
    if not 1 <= turn_index <= len(dialogue.turns):
        raise ValueError(
            f"turn index {turn_index} out of range for dialogue "
            f"{dialogue.dialogue_id!r} with {len(dialogue.turns)} turns"
        )
    exchanges: list[tuple[str, str]] = []
    for j in range(turn_index - width + 1, turn_index + 1):
        if j >= 1:
            turn = dialogue.turns[j - 1]
            exchanges.append((turn.system_utterance, turn.user_utterance))
        else:
            exchanges.append(("", ""))
    return ContextWindow(tuple(exchanges))
