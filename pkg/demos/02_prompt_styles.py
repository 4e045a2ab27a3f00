"""The four prompt styles, rendered side by side.

Two families (hotel-style and schema-guided) times two passes (inference and
correction). The block grammar is fixed; correction styles add a [HYP] line
before every [TLB], and the schema-guided family moves the examples ahead of
the schema.
"""

from pathlib import Path

from twopass_dst import (
    ContextWindow,
    DialogueState,
    Exemplar,
    PromptStyle,
    TurnBelief,
    build_correction_prompt,
    build_inference_prompt,
    parse_tlb,
)
from twopass_dst.schema import load_schema

schema = load_schema(Path(__file__).parent.parent / "tests" / "fixtures" / "schema.json")

prev = DialogueState.from_dict({"hotel-area": "east"})
ctx = ContextWindow((("the acorn house is available.", "book it with parking"),))
demo = Exemplar(
    prev_state=DialogueState(),
    ctx=ContextWindow((("", "i want cheap thai food"),)),
    gold_tlb=TurnBelief.from_dict({"restaurant-food": "thai"}),
)

prompt = build_inference_prompt(PromptStyle.MWOZ_INFERENCE, schema, [demo], prev, ctx)
print("=== inference prompt ===")
print(prompt.text)
print(f"\n~{prompt.token_estimate} tokens")

# The correction pass shows the model its own first guess.
hyp = TurnBelief.from_dict({"hotel-parking": "no"})
demo_with_hyp = Exemplar(
    prev_state=demo.prev_state, ctx=demo.ctx, gold_tlb=demo.gold_tlb,
    hypothesis=TurnBelief.from_dict({"restaurant-food": "tai"}),
)
correction = build_correction_prompt(
    PromptStyle.MWOZ_CORRECTION, schema, [demo_with_hyp], prev, ctx, hyp,
    instruction="Revise the hypothesis so it matches the conversation.",
)
print("\n=== correction prompt (with instruction preamble) ===")
print(correction.text)

# Completions parse back into beliefs; garbage degrades to diagnostics.
print("\n=== parsing completions ===")
print(parse_tlb("hotel-parking: yes; hotel-stars: 4"))
print(parse_tlb("NONE"))
print(parse_tlb("total garbage output"))
