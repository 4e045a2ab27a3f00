#!/usr/bin/env python3
"""Regenerate the checked-in test fixtures.

Deterministic: running this twice produces byte-identical files. The corpus
is synthetic but structurally faithful: multi-domain dialogues, slot
overwrites, [DELETE] turns, and stored states that equal the accumulation of
the turn beliefs.
"""

from __future__ import annotations

import json
import random
import sys
from pathlib import Path

from twopass_dst.schema import SchemaTable

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "fixtures"

sys.path.insert(0, str(ROOT / "tests"))
from golden_scene import build_golden_prompts  # noqa: E402

SCHEMA = {
    "hotel": {
        "area": {"description": "area of town for the hotel",
                 "values": ["centre", "east", "north", "south", "west"]},
        "stars": {"description": "star rating of the hotel",
                  "values": ["1", "2", "3", "4", "5"]},
        "parking": {"description": "whether the hotel needs free parking",
                    "values": ["yes", "no"]},
        "name": {"description": "name of the hotel"},
    },
    "restaurant": {
        "food": {"description": "cuisine of the restaurant"},
        "area": {"description": "area of town for the restaurant",
                 "values": ["centre", "east", "north", "south", "west"]},
        "pricerange": {"description": "price range of the restaurant",
                       "values": ["cheap", "moderate", "expensive"]},
    },
    "taxi": {
        "destination": {"description": "destination of the taxi"},
        "leaveat": {"description": "time the taxi should leave"},
    },
    "flight": {
        "origin": {"description": "city the flight departs from"},
        "day": {"description": "day of the week for the flight",
                "values": ["monday", "tuesday", "wednesday", "thursday",
                           "friday", "saturday", "sunday"]},
    },
    "train": {
        "day": {"description": "day of the week for the train",
                "values": ["monday", "tuesday", "wednesday", "thursday",
                           "friday", "saturday", "sunday"]},
        "people": {"description": "number of train tickets",
                   "values": ["1", "2", "3", "4", "5", "6", "7", "8"]},
    },
}

FREE_VALUES = {
    "hotel-name": ["acorn house", "blue boar inn", "city lodge", "garden view"],
    "restaurant-food": ["thai", "british", "italian", "indian", "chinese"],
    "taxi-destination": ["the airport", "the museum", "the station", "city centre"],
    "taxi-leaveat": ["08:15", "09:30", "13:00", "17:45"],
    "flight-origin": ["london", "paris", "oslo", "berlin"],
}

SYNONYMS = {
    "hotel-area": {"centre": ["centre", "center", "central"]},
    "restaurant-food": {"thai": ["thai", "thai food"]},
    "train-people": {"2": ["2", "two"]},
}


def slot_values(schema: dict, qualified: str) -> list[str]:
    domain, name = qualified.split("-", 1)
    spec = schema[domain][name]
    if "values" in spec:
        return list(spec["values"])
    return FREE_VALUES[qualified]


def make_dialogue(rng: random.Random, dialogue_id: str, schema: dict) -> dict:
    domains = rng.sample(sorted(schema), rng.choice([1, 1, 2]))
    slots = [f"{d}-{s}" for d in domains for s in schema[d]]
    turn_count = rng.randint(3, 8)
    state: dict[str, str] = {}
    turns = []
    last_summary = ""
    for turn_index in range(1, turn_count + 1):
        tlb: dict[str, str] = {}
        if state and rng.random() < 0.2:
            victim = rng.choice(sorted(state))
            tlb[victim] = "[DELETE]"
        adds = rng.randint(1, 2) if turn_index == 1 else rng.randint(0, 2)
        if turn_index == 1:
            adds = max(1, adds)
        for _ in range(adds):
            slot = rng.choice(slots)
            if slot in tlb:
                continue
            tlb[slot] = rng.choice(slot_values(schema, slot))
        if not tlb:
            slot = rng.choice(slots)
            tlb[slot] = rng.choice(slot_values(schema, slot))

        phrases = []
        for slot, value in sorted(tlb.items()):
            short = slot.split("-", 1)[1]
            if value == "[DELETE]":
                phrases.append(f"actually forget the {short}")
            else:
                phrases.append(f"{short} should be {value}")
        user = "i am looking at " + " and ".join(sorted(domains)) + ": " + ", ".join(phrases)
        system = "" if turn_index == 1 else f"noted. {last_summary}"
        last_summary = ", ".join(f"{k} is {v}" for k, v in sorted(tlb.items()))

        for slot, value in tlb.items():
            if value == "[DELETE]":
                state.pop(slot, None)
            else:
                state[slot] = value
        turns.append({
            "system": system,
            "user": user,
            "tlb": dict(sorted(tlb.items())),
            "state": dict(sorted(state.items())),
        })
    observed = sorted({slot.split("-", 1)[0] for t in turns for slot in t["state"]})
    return {"dialogue_id": dialogue_id, "domains": observed, "turns": turns}


def write_jsonl(path: Path, records: list[dict]) -> None:
    path.write_text(
        "\n".join(json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records) + "\n",
        encoding="utf-8",
    )


def make_goldens(golden_dir: Path) -> None:
    schema = SchemaTable.from_dict(SCHEMA)
    golden_dir.mkdir(parents=True, exist_ok=True)
    for name, text in build_golden_prompts(schema).items():
        (golden_dir / f"{name}.txt").write_text(text, encoding="utf-8")


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    (FIXTURES / "schema.json").write_text(
        json.dumps(SCHEMA, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (FIXTURES / "synonyms.json").write_text(
        json.dumps(SYNONYMS, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    rng = random.Random(20240817)
    train = [make_dialogue(rng, f"train-{i:03d}", SCHEMA) for i in range(1, 31)]
    rng = random.Random(911)
    evaluation = [make_dialogue(rng, f"eval-{i:03d}", SCHEMA) for i in range(1, 21)]
    write_jsonl(FIXTURES / "train.jsonl", train)
    write_jsonl(FIXTURES / "eval.jsonl", evaluation)

    make_goldens(FIXTURES / "golden")

    train_turns = sum(len(d["turns"]) for d in train)
    eval_turns = sum(len(d["turns"]) for d in evaluation)
    print(f"wrote {len(train)} train dialogues ({train_turns} turns), "
          f"{len(evaluation)} eval dialogues ({eval_turns} turns)")


if __name__ == "__main__":
    main()
