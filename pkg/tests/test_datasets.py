from __future__ import annotations

import json

import pytest

from twopass_dst.datasets import load_dataset, sample_low_resource, write_dataset
from twopass_dst.errors import (
    ConsistencyError,
    DataFormatError,
    UnknownSlotError,
    ValidationError,
)
from twopass_dst.schema import SchemaTable, load_schema
from twopass_dst.states import accumulate


def write_lines(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


def simple_dialogue(dialogue_id="d1", state_turn2=None):
    turns = [
        {"system": "", "user": "hotel in the east",
         "tlb": {"hotel-area": "east"}, "state": {"hotel-area": "east"}},
        {"system": "ok", "user": "4 stars",
         "tlb": {"hotel-stars": "4"},
         "state": state_turn2 or {"hotel-area": "east", "hotel-stars": "4"}},
    ]
    return {"dialogue_id": dialogue_id, "domains": ["hotel"], "turns": turns}


class TestLoadDataset:
    def test_valid_two_dialogue_file(self, tmp_path, schema):
        path = tmp_path / "data.jsonl"
        write_lines(path, [simple_dialogue("d1"), simple_dialogue("d2")])
        split = load_dataset(path, schema)
        assert len(split.dialogues) == 2
        assert split.domain_set == {"hotel"}
        assert split.warnings == ()

    def test_unknown_slot_is_named(self, tmp_path, schema):
        record = simple_dialogue()
        record["turns"][0]["tlb"] = {"hotel-unknownslot": "x"}
        record["turns"][0]["state"] = {"hotel-unknownslot": "x"}
        path = tmp_path / "data.jsonl"
        write_lines(path, [record])
        with pytest.raises(UnknownSlotError, match="hotel-unknownslot"):
            load_dataset(path, schema)

    def test_state_inconsistency_warns_by_default(self, tmp_path, schema):
        record = simple_dialogue(state_turn2={"hotel-stars": "4"})
        path = tmp_path / "data.jsonl"
        write_lines(path, [record])
        split = load_dataset(path, schema)
        assert len(split.warnings) == 1
        assert "turn 2" in split.warnings[0]

    def test_state_inconsistency_strict_raises(self, tmp_path, schema):
        record = simple_dialogue(state_turn2={"hotel-stars": "4"})
        path = tmp_path / "data.jsonl"
        write_lines(path, [record])
        with pytest.raises(ConsistencyError):
            load_dataset(path, schema, strict=True)

    def test_parse_error_carries_line_number(self, tmp_path, schema):
        path = tmp_path / "data.jsonl"
        path.write_text(
            json.dumps(simple_dialogue()) + "\n{not json\n", encoding="utf-8"
        )
        with pytest.raises(DataFormatError, match=":2:"):
            load_dataset(path, schema)

    def test_duplicate_dialogue_id(self, tmp_path, schema):
        path = tmp_path / "data.jsonl"
        write_lines(path, [simple_dialogue("d1"), simple_dialogue("d1")])
        with pytest.raises(DataFormatError, match="duplicate"):
            load_dataset(path, schema)

    def test_values_are_normalized(self, tmp_path, schema):
        record = simple_dialogue()
        record["turns"][0]["tlb"] = {"hotel-area": "  EAST "}
        record["turns"][0]["state"] = {"hotel-area": "East"}
        path = tmp_path / "data.jsonl"
        write_lines(path, [record])
        split = load_dataset(path, schema)
        assert split.dialogues[0].turns[0].gold_tlb.to_dict() == {"hotel-area": "east"}

    def test_declared_domain_mismatch_warns(self, tmp_path, schema):
        record = simple_dialogue()
        record["domains"] = ["hotel", "taxi"]
        path = tmp_path / "data.jsonl"
        write_lines(path, [record])
        split = load_dataset(path, schema)
        assert any("declared domains" in w for w in split.warnings)
        assert split.dialogues[0].domains == {"hotel"}

    def test_missing_file(self, schema, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            load_dataset(tmp_path / "nope.jsonl", schema)

    def test_fixture_gold_states_accumulate(self, train_split, eval_split):
        for split in (train_split, eval_split):
            for dialogue in split.dialogues:
                states = accumulate(t.gold_tlb for t in dialogue.turns)
                for turn, expected in zip(dialogue.turns, states):
                    assert turn.gold_state == expected


class TestSampleLowResource:
    def test_deterministic_for_seed(self, train_split):
        a = sample_low_resource(train_split, 0.2, seed=7)
        b = sample_low_resource(train_split, 0.2, seed=7)
        assert [d.dialogue_id for d in a.dialogues] == [d.dialogue_id for d in b.dialogues]

    def test_ceiling_rule(self, train_split):
        out = sample_low_resource(train_split, 0.05, seed=0)
        assert len(out.dialogues) == 2  # ceil(0.05 * 30)

    def test_full_fraction_keeps_all(self, train_split):
        out = sample_low_resource(train_split, 1.0, seed=3)
        assert len(out.dialogues) == len(train_split.dialogues)

    def test_fraction_out_of_range(self, train_split):
        with pytest.raises(ValidationError):
            sample_low_resource(train_split, 0.0, seed=1)
        with pytest.raises(ValidationError):
            sample_low_resource(train_split, 1.5, seed=1)

    def test_different_seeds_differ(self, train_split):
        ids = {
            tuple(d.dialogue_id for d in sample_low_resource(train_split, 0.2, seed=s).dialogues)
            for s in range(8)
        }
        assert len(ids) > 1


class TestRoundTrip:
    def test_write_then_load_is_identical(self, tmp_path, schema, train_split):
        path = tmp_path / "roundtrip.jsonl"
        write_dataset(train_split, path)
        again = load_dataset(path, schema)
        assert again.dialogues == train_split.dialogues


class TestSchema:
    def test_loads_fixture(self, schema):
        assert "hotel" in schema.domain_names
        assert schema.has_slot("hotel-area")
        assert not schema.has_slot("hotel-bogus")

    def test_restricted_to(self, schema):
        sub = schema.restricted_to(["hotel"])
        assert sub.domain_names == ("hotel",)
        with pytest.raises(ValidationError):
            schema.restricted_to(["spaceport"])

    def test_slots_sorted(self, schema):
        names = [s.name for s in schema.slots_for("hotel")]
        assert names == sorted(names)

    def test_duplicate_slot_rejected(self):
        with pytest.raises(ValidationError):
            SchemaTable.from_dict({"a": {"x": {"description": "d"},
                                         "x ": {"description": "d"}}})

    def test_missing_description_rejected(self):
        with pytest.raises(ValidationError):
            SchemaTable.from_dict({"a": {"x": {"values": ["1"]}}})

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_schema(tmp_path / "missing.json")
