"""Prompt rendering and completion parsing.

Four prompt styles cover two dataset families times two passes. The block
grammar is fixed and golden-tested; the markers below are the entire
vocabulary:

    [SCHEMA]     schema table block (one [DOMAIN] section per domain)
    [EXAMPLE i]  one retrieved demonstration
    [TARGET]     the turn being predicted; always the last block
    [STATE]      accumulated state before the turn ("NONE" when empty)
    [SYS]/[USER] one exchange; "[NONE]" stands in for an absent utterance
    [HYP]        a prior hypothesis (correction styles only)
    [TLB]        the output cue; followed by "slot: value; ..." or "NONE"

Family differences: the hotel-style family puts the shared schema first and
uses one exchange of context; the schema-guided family puts the examples
first (each carrying its own schema restricted to its domains), then the
target-domain schema, and uses three exchanges. Correction styles add the
[HYP] line immediately before the [TLB] line in every example and in the
target.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import TlbParseError, ValidationError
from .schema import SchemaTable
from .states import ContextWindow, DialogueState, SlotValuePair, TurnBelief

SCHEMA_MARK = "[SCHEMA]"
DOMAIN_MARK = "[DOMAIN]"
TARGET_MARK = "[TARGET]"
STATE_MARK = "[STATE]"
SYS_MARK = "[SYS]"
USER_MARK = "[USER]"
HYP_MARK = "[HYP]"
TLB_MARK = "[TLB]"
NONE_UTTERANCE = "[NONE]"
NONE_PAIRS = "NONE"

_ALL_MARKS = (SCHEMA_MARK, DOMAIN_MARK, TARGET_MARK, STATE_MARK, SYS_MARK,
              USER_MARK, HYP_MARK, TLB_MARK, "[EXAMPLE")
_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|[^\sA-Za-z0-9_]")


class PromptStyle(Enum):
    MWOZ_INFERENCE = "mwoz_inference"
    MWOZ_CORRECTION = "mwoz_correction"
    SGD_INFERENCE = "sgd_inference"
    SGD_CORRECTION = "sgd_correction"

    @property
    def is_correction(self) -> bool:
        return self in (PromptStyle.MWOZ_CORRECTION, PromptStyle.SGD_CORRECTION)

    @property
    def is_sgd(self) -> bool:
        return self in (PromptStyle.SGD_INFERENCE, PromptStyle.SGD_CORRECTION)

    @property
    def default_k(self) -> int:
        return 3 if self.is_sgd else 10

    @property
    def default_width(self) -> int:
        return 3 if self.is_sgd else 1

    def inference_variant(self) -> "PromptStyle":
        return PromptStyle.SGD_INFERENCE if self.is_sgd else PromptStyle.MWOZ_INFERENCE

    def correction_variant(self) -> "PromptStyle":
        return PromptStyle.SGD_CORRECTION if self.is_sgd else PromptStyle.MWOZ_CORRECTION


@dataclass(frozen=True)
class Exemplar:
    """One retrieved demonstration: prior state, context, and gold output.

    A hypothesis is required by correction styles and forbidden otherwise;
    the local schema is required by schema-guided styles and forbidden
    otherwise.
    """

    prev_state: DialogueState
    ctx: ContextWindow
    gold_tlb: TurnBelief
    hypothesis: TurnBelief | None = None
    schema_local: SchemaTable | None = None


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    token_estimate: int
    style: PromptStyle


def estimate_tokens(text: str) -> int:
    """Cheap token-count proxy: words plus punctuation, chars/4 as a floor."""
    count = len(_TOKEN_RE.findall(text))
    return count if count else max(1, len(text) // 4)


def render_pairs(pairs: DialogueState | TurnBelief) -> str:
    if not pairs:
        return NONE_PAIRS
    return "; ".join(f"{p.slot}: {p.value}" for p in pairs.pairs)


def render_tlb(tlb: TurnBelief) -> str:
    """Canonical surface form: "slot: value; ..." in slot order, or "NONE"."""
    return render_pairs(tlb)


def render_schema(schema: SchemaTable, domains: Iterable[str]) -> str:
    """One [DOMAIN] section per requested domain, one slot per line."""
    wanted = sorted(set(domains))
    if not wanted:
        raise ValidationError("cannot render a schema for an empty domain set")
    lines: list[str] = []
    for domain in wanted:
        lines.append(f"{DOMAIN_MARK} {domain}")
        for spec in schema.slots_for(domain):
            line = f"{domain}-{spec.name}: {spec.description}"
            if spec.values:
                line += f" (values: {', '.join(spec.values)})"
            lines.append(line)
    return "\n".join(lines)


def _utterance(text: str) -> str:
    return text if text else NONE_UTTERANCE


def _context_lines(ctx: ContextWindow) -> list[str]:
    lines: list[str] = []
    for system, user in ctx.exchanges:
        lines.append(f"{SYS_MARK} {_utterance(system)}")
        lines.append(f"{USER_MARK} {_utterance(user)}")
    return lines


def _example_block(position: int, exemplar: Exemplar, style: PromptStyle) -> str:
    lines = [f"[EXAMPLE {position}]"]
    if style.is_sgd:
        if exemplar.schema_local is None:
            raise ValidationError(f"example {position}: schema-guided styles need a local schema")
        lines.append(SCHEMA_MARK)
        lines.append(render_schema(exemplar.schema_local, exemplar.schema_local.domain_names))
    elif exemplar.schema_local is not None:
        raise ValidationError(f"example {position}: local schemas are only used by schema-guided styles")
    lines.append(f"{STATE_MARK} {render_pairs(exemplar.prev_state)}")
    lines.extend(_context_lines(exemplar.ctx))
    if style.is_correction:
        if exemplar.hypothesis is None:
            raise ValidationError(f"example {position}: correction styles need a hypothesis")
        lines.append(f"{HYP_MARK} {render_tlb(exemplar.hypothesis)}")
    elif exemplar.hypothesis is not None:
        raise ValidationError(f"example {position}: inference styles must not carry hypotheses")
    lines.append(f"{TLB_MARK} {render_tlb(exemplar.gold_tlb)}")
    return "\n".join(lines)


def _target_block(prev_state: DialogueState, ctx: ContextWindow,
                  hyp: TurnBelief | None) -> str:
    lines = [TARGET_MARK, f"{STATE_MARK} {render_pairs(prev_state)}"]
    lines.extend(_context_lines(ctx))
    if hyp is not None:
        lines.append(f"{HYP_MARK} {render_tlb(hyp)}")
    lines.append(TLB_MARK)
    return "\n".join(lines)


def _assemble(style: PromptStyle, schema: SchemaTable, exemplars: Sequence[Exemplar],
              target: str, instruction: str | None) -> RenderedPrompt:
    schema_block = SCHEMA_MARK + "\n" + render_schema(schema, schema.domain_names)
    example_blocks = [_example_block(i, ex, style) for i, ex in enumerate(exemplars, start=1)]
    if style.is_sgd:
        blocks = example_blocks + [schema_block, target]
    else:
        blocks = [schema_block] + example_blocks + [target]
    if instruction:
        blocks.insert(0, instruction.strip())
    text = "\n\n".join(blocks)
    return RenderedPrompt(text, estimate_tokens(text), style)


def build_inference_prompt(style: PromptStyle, schema: SchemaTable,
                           exemplars: Sequence[Exemplar],
                           prev_state: DialogueState, ctx: ContextWindow,
                           max_exemplars: int | None = None) -> RenderedPrompt:
    """First-pass prompt: schema, demonstrations, then the target turn.

    For schema-guided styles the caller passes the target-domain restriction
    of the schema table; demonstrations precede it and carry their own local
    schemas. Exemplars must be given in descending retrieval score and may
    not exceed the effective k (the style default unless overridden).
    """
    if style.is_correction:
        raise ValidationError(f"{style.value} is not an inference style")
    cap = max_exemplars if max_exemplars is not None else style.default_k
    if len(exemplars) > cap:
        raise ValidationError(
            f"{len(exemplars)} exemplars exceed k={cap} for {style.value}"
        )
    target = _target_block(prev_state, ctx, None)
    return _assemble(style, schema, exemplars, target, None)


def build_correction_prompt(style: PromptStyle, schema: SchemaTable,
                            exemplars: Sequence[Exemplar],
                            prev_state: DialogueState, ctx: ContextWindow,
                            hyp: TurnBelief,
                            instruction: str | None = None,
                            max_exemplars: int | None = None) -> RenderedPrompt:
    """Second-pass prompt: every example shows its own hypothesis before the
    gold output, and the target ends with the hypothesis to revise."""
    if not style.is_correction:
        raise ValidationError(f"{style.value} is not a correction style")
    if hyp is None:
        raise ValidationError("correction prompts need the first-pass hypothesis")
    cap = max_exemplars if max_exemplars is not None else style.default_k
    if len(exemplars) > cap:
        raise ValidationError(
            f"{len(exemplars)} exemplars exceed k={cap} for {style.value}"
        )
    target = _target_block(prev_state, ctx, hyp)
    return _assemble(style, schema, exemplars, target, instruction)


def render_training_sequence(style: PromptStyle, schema: SchemaTable,
                             exemplars: Sequence[Exemplar],
                             prev_state: DialogueState, ctx: ContextWindow,
                             hyp: TurnBelief, gold: TurnBelief,
                             instruction: str | None = None,
                             max_exemplars: int | None = None) -> tuple[str, tuple[int, int]]:
    """Correction prompt with the gold output appended after the cue.

    Returns the full text and the (start, end) span of the rendered gold
    belief, so a trainer can choose full-sequence or span-only loss.
    """
    prompt = build_correction_prompt(style, schema, exemplars, prev_state, ctx, hyp,
                                     instruction, max_exemplars)
    rendered_gold = render_tlb(gold)
    full_text = prompt.text + " " + rendered_gold
    start = len(prompt.text) + 1
    return full_text, (start, start + len(rendered_gold))


@dataclass(frozen=True)
class ParseResult:
    tlb: TurnBelief
    diagnostics: tuple[str, ...] = ()


def _first_segment(completion: str) -> str:
    text = completion.strip()
    cut = text.find("\n")
    if cut != -1:
        text = text[:cut]
    for mark in _ALL_MARKS:
        pos = text.find(mark)
        if pos != -1:
            text = text[:pos]
    return text.strip()


def parse_tlb(completion: str, strict: bool = False) -> ParseResult:
    """Parse a model completion back into a turn belief.

    Reads the first line up to any block marker and splits it on "; ". Items
    that do not fit the "slot: value" shape become diagnostics: lenient mode
    skips them, strict mode raises, and text with no parseable item at all
    yields an empty belief plus a diagnostic in both modes. Duplicate slots
    keep the last occurrence.
    """
    segment = _first_segment(completion)
    if not segment or segment.upper() == NONE_PAIRS:
        return ParseResult(TurnBelief())

    parsed: dict[str, SlotValuePair] = {}
    diagnostics: list[str] = []
    for item in segment.split("; "):
        item = item.strip()
        if not item:
            diagnostics.append("empty item")
            continue
        slot_part, sep, value_part = item.partition(": ")
        if not sep:
            diagnostics.append(f"no 'slot: value' separator in {item!r}")
            continue
        try:
            pair = SlotValuePair(slot_part, value_part)
        except ValueError as exc:
            diagnostics.append(f"bad pair {item!r}: {exc}")
            continue
        parsed[pair.slot] = pair

    if not parsed and diagnostics:
        return ParseResult(TurnBelief(), tuple(diagnostics))
    if strict and diagnostics:
        raise TlbParseError(tuple(diagnostics))
    return ParseResult(TurnBelief(parsed.values()), tuple(diagnostics))
