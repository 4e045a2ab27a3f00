from __future__ import annotations

from pathlib import Path

import pytest

from twopass_dst.datasets import load_dataset
from twopass_dst.schema import load_schema

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def schema():
    return load_schema(FIXTURES / "schema.json")


@pytest.fixture(scope="session")
def train_split(schema):
    return load_dataset(FIXTURES / "train.jsonl", schema, name="train")


@pytest.fixture(scope="session")
def eval_split(schema):
    return load_dataset(FIXTURES / "eval.jsonl", schema, name="test")
