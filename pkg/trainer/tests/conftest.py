from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

TRAINER_ROOT = Path(__file__).resolve().parent.parent
REPO_ROOT = TRAINER_ROOT.parent
PRIMARY_FIXTURES = REPO_ROOT / "tests" / "fixtures"

TINY_SCHEMA = {
    "food": {
        "dish": {"description": "dish name"},
        "spice": {"description": "spice level", "values": ["mild", "hot"]},
    },
    "ride": {
        "stop": {"description": "drop-off stop"},
        "time": {"description": "pickup time"},
    },
}

DISHES = ["noodles", "curry", "soup", "rice"]
STOPS = ["museum", "airport", "harbor"]
TIMES = ["08:00", "12:30", "18:15"]


def tiny_corpus(n_dialogues: int) -> list[dict]:
    dialogues = []
    for i in range(n_dialogues):
        domain = "food" if i % 2 == 0 else "ride"
        if domain == "food":
            values = [("food-dish", DISHES[i % len(DISHES)]),
                      ("food-spice", "hot" if i % 3 else "mild"),
                      ("food-dish", DISHES[(i + 1) % len(DISHES)])]
        else:
            values = [("ride-stop", STOPS[i % len(STOPS)]),
                      ("ride-time", TIMES[i % len(TIMES)]),
                      ("ride-stop", STOPS[(i + 1) % len(STOPS)])]
        state: dict[str, str] = {}
        turns = []
        for t, (slot, value) in enumerate(values, start=1):
            state = dict(state)
            state[slot] = value
            turns.append({
                "system": "" if t == 1 else "ok",
                "user": f"set {slot.split('-', 1)[1]} to {value}",
                "tlb": {slot: value},
                "state": dict(sorted(state.items())),
            })
        dialogues.append({
            "dialogue_id": f"tiny-{i:02d}",
            "domains": [domain],
            "turns": turns,
        })
    return dialogues


def run_cli(config_path: Path, command: str) -> None:
    result = subprocess.run(
        [sys.executable, "-m", "twopass_dst.cli", "--config", str(config_path), command],
        capture_output=True, text=True, cwd=str(REPO_ROOT),
    )
    if result.returncode != 0:
        raise RuntimeError(
            f"primary CLI {command} failed ({result.returncode}):\n{result.stderr}"
        )


def export_via_cli(workdir: Path, schema: dict, train: list[dict], eval_rows: list[dict],
                   *, k: int = 1, fraction: float = 1.0) -> Path:
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "schema.json").write_text(json.dumps(schema, indent=2), encoding="utf-8")
    for name, rows in (("train.jsonl", train), ("eval.jsonl", eval_rows)):
        (workdir / name).write_text(
            "\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    out = workdir / "out"
    config = {
        "schema_path": str(workdir / "schema.json"),
        "train_path": str(workdir / "train.jsonl"),
        "eval_path": str(workdir / "eval.jsonl"),
        "output_dir": str(out),
        "style": "mwoz_inference",
        "k": k,
        "fraction": fraction,
        "seeds": {"split": 1, "demos": 2, "noise": 3},
        "backends": {
            "inference": {"kind": "oracle_noise", "p": 0.3, "params": 1000000},
            "correction": {"kind": "oracle_noise", "p": 0.0, "params": 1000000},
            "embedding": {"kind": "hash", "dim": 16, "seed": 0},
        },
    }
    config_path = workdir / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    for command in ("split", "index", "collect", "export-train", "export-retriever-pairs"):
        run_cli(config_path, command)
    return out


@pytest.fixture(scope="session")
def tiny_exports(tmp_path_factory) -> Path:
    """Exports produced by the primary CLI over a very small corpus."""
    workdir = tmp_path_factory.mktemp("tiny_exports")
    dialogues = tiny_corpus(12)
    return export_via_cli(workdir, TINY_SCHEMA, dialogues, dialogues[:2])


@pytest.fixture(scope="session")
def fixture_corpus_exports(tmp_path_factory) -> Path:
    """Exports over the primary package's checked-in fixture corpus."""
    workdir = tmp_path_factory.mktemp("fixture_exports")
    schema = json.loads((PRIMARY_FIXTURES / "schema.json").read_text(encoding="utf-8"))
    train = [json.loads(line) for line in
             (PRIMARY_FIXTURES / "train.jsonl").read_text(encoding="utf-8").splitlines()]
    eval_rows = [json.loads(line) for line in
                 (PRIMARY_FIXTURES / "eval.jsonl").read_text(encoding="utf-8").splitlines()]
    return export_via_cli(workdir, schema, train, eval_rows, k=3, fraction=0.3)


@pytest.fixture(scope="session")
def sequences_32(tiny_exports, tmp_path_factory) -> Path:
    lines = (tiny_exports / "training_sequences.jsonl").read_text(
        encoding="utf-8").splitlines()
    assert len(lines) >= 32, f"expected at least 32 sequences, got {len(lines)}"
    path = tmp_path_factory.mktemp("subset") / "sequences_32.jsonl"
    path.write_text("\n".join(lines[:32]) + "\n", encoding="utf-8")
    return path
