"""States and scoring in five minutes.

A turn belief holds what changed at one turn; aggregating beliefs gives the
dialogue state. Joint goal accuracy is all-or-nothing per turn, F1 gives
partial credit.
"""

from twopass_dst import (
    DialogueState,
    SynonymTable,
    TurnBelief,
    accumulate,
    aggregate_state,
    evaluate_run,
    joint_goal,
    set_f1,
)
from twopass_dst.metrics import TurnRecord

# Build up a state turn by turn. The reserved value [DELETE] clears a slot.
beliefs = [
    TurnBelief.from_dict({"hotel-area": "east"}),
    TurnBelief.from_dict({"hotel-stars": "4", "hotel-area": "west"}),
    TurnBelief.from_dict({"hotel-stars": "[DELETE]"}),
]
for belief, state in zip(beliefs, accumulate(beliefs)):
    print(f"after {belief!r:60} -> {state!r}")

# Scoring a single turn.
gold = TurnBelief.from_dict({"hotel-area": "east", "hotel-stars": "4"})
hyp = TurnBelief.from_dict({"hotel-area": "east", "hotel-parking": "yes"})
print("\njoint goal:", joint_goal(hyp, gold))
print("precision/recall/f1:", set_f1(hyp, gold))

# A synonym table widens what counts as a value match.
synonyms = SynonymTable({("hotel-area", "east"): ["east", "eastside"]})
near_miss = TurnBelief.from_dict({"hotel-area": "eastside", "hotel-stars": "4"})
print("without synonyms:", joint_goal(near_miss, gold))
print("with synonyms:   ", joint_goal(near_miss, gold, synonyms))

# Whole-run evaluation takes per-turn records and re-accumulates states.
records = [
    TurnRecord("demo", 1, gold, DialogueState.from_dict(gold.to_dict()),
               hyp_tlb_first=near_miss),
]
print("\nrun metrics:", evaluate_run(records, synonyms, mode="first").to_dict())

# aggregate_state is the single-step version of accumulate.
print("\none step:", aggregate_state(DialogueState(), beliefs[0]))
