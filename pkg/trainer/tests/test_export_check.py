from __future__ import annotations

import json

import pytest

from correction_trainer import SchemaError, validate_export


def sequence_record(i=1, **overrides):
    record = {
        "example_id": f"d:{i}",
        "text": "[SCHEMA]\nstuff\n\n[TARGET]\n[TLB] food-dish: soup",
        "target_start": 31,
        "target_end": 46,
        "meta": {"retrieved": [], "style": "mwoz_correction"},
    }
    record.update(overrides)
    return record


def write(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


class TestSequences:
    def test_valid_file_counts(self, tmp_path):
        path = write(tmp_path / "seq.jsonl", [sequence_record(i) for i in range(10)])
        report = validate_export(path)
        assert report.kind == "sequences"
        assert report.records == 10
        assert str(report) == "10 sequences, 0 errors"

    def test_offsets_past_end(self, tmp_path):
        bad = sequence_record(target_start=10, target_end=10_000)
        path = write(tmp_path / "seq.jsonl", [sequence_record(0), bad])
        with pytest.raises(SchemaError, match="line 2"):
            validate_export(path)

    def test_duplicate_example_id(self, tmp_path):
        path = write(tmp_path / "seq.jsonl", [sequence_record(7), sequence_record(7)])
        with pytest.raises(SchemaError, match="d:7"):
            validate_export(path)

    def test_span_must_parse_as_belief(self, tmp_path):
        bad = sequence_record(text="prefix [TLB] not a pair at all", target_start=13,
                              target_end=30)
        path = write(tmp_path / "seq.jsonl", [bad])
        with pytest.raises(SchemaError, match="does not parse"):
            validate_export(path)

    def test_none_span_is_valid(self, tmp_path):
        record = sequence_record(text="x [TLB] NONE", target_start=8, target_end=12)
        path = write(tmp_path / "seq.jsonl", [record])
        assert validate_export(path).records == 1


class TestPairs:
    def pair(self, label=0.5):
        return {"anchor_text": "[STATE] NONE [SYS] a [USER] b",
                "candidate_text": "[STATE] NONE [SYS] c [USER] d",
                "label": label}

    def test_valid_pairs(self, tmp_path):
        path = write(tmp_path / "pairs.jsonl", [self.pair(), self.pair(1.0), self.pair(0.0)])
        report = validate_export(path)
        assert report.kind == "pairs"
        assert report.records == 3

    def test_label_out_of_range(self, tmp_path):
        path = write(tmp_path / "pairs.jsonl", [self.pair(1.5)])
        with pytest.raises(SchemaError, match="outside"):
            validate_export(path)

    def test_unknown_shape(self, tmp_path):
        path = write(tmp_path / "odd.jsonl", [{"who": "knows"}])
        with pytest.raises(SchemaError, match="unrecognized"):
            validate_export(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(SchemaError, match="no records"):
            validate_export(path)


class TestContractRoundTrip:
    """Acceptance: every file the pipeline exports validates cleanly."""

    def test_fixture_corpus_sequences(self, fixture_corpus_exports):
        report = validate_export(fixture_corpus_exports / "training_sequences.jsonl")
        assert report.kind == "sequences"
        assert report.errors == 0
        assert report.records > 0
        print(f"[ACCEPTANCE] contract round-trip (sequences): PASS ({report})")

    def test_fixture_corpus_pairs(self, fixture_corpus_exports):
        report = validate_export(fixture_corpus_exports / "retriever_pairs.jsonl")
        assert report.kind == "pairs"
        assert report.errors == 0
        assert report.records > 0
        print(f"[ACCEPTANCE] contract round-trip (pairs): PASS ({report})")

    def test_tiny_corpus_exports(self, tiny_exports):
        assert validate_export(tiny_exports / "training_sequences.jsonl").errors == 0
        assert validate_export(tiny_exports / "retriever_pairs.jsonl").errors == 0
