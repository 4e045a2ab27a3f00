"""The training-data factory, stage by stage.

Step one samples 5 fixed demonstrations and collects a first-pass hypothesis
for every training turn (each turn's own prompt excludes itself). Step two
renders correction sequences that end in the gold belief, plus the span
offsets a trainer needs for loss masking. The retriever-pairs export labels
text pairs with the F1 of their gold beliefs.
"""

import json
import tempfile
from pathlib import Path

from twopass_dst.backends import OracleNoiseBackend
from twopass_dst.datasets import load_dataset, sample_low_resource
from twopass_dst.pipeline import (
    BackendSpec,
    EmbeddingSpec,
    RunConfig,
    Seeds,
    collect_demonstrations,
    export_pairs_for_split,
    export_training_sequences,
    gold_tlb_map,
    iter_training_examples,
)
from twopass_dst.prompts import PromptStyle, parse_tlb
from twopass_dst.retrieval import HashEmbeddingBackend, build_index
from twopass_dst.schema import load_schema

fixtures = Path(__file__).parent.parent / "tests" / "fixtures"
out = Path(tempfile.mkdtemp(prefix="twopass_factory_"))
schema = load_schema(fixtures / "schema.json")
train = sample_low_resource(
    load_dataset(fixtures / "train.jsonl", schema, name="train"), 0.2, seed=13
)
cfg = RunConfig(
    schema_path=str(fixtures / "schema.json"),
    train_path=str(fixtures / "train.jsonl"),
    eval_path=str(fixtures / "eval.jsonl"),
    output_dir=str(out),
    style=PromptStyle.MWOZ_INFERENCE,
    seeds=Seeds(split=13, demos=7, noise=3),
    inference_backend=BackendSpec(kind="oracle_noise", p=0.3),
    correction_backend=BackendSpec(kind="oracle_noise", p=0.0),
    fraction=0.2,
)

# Step 1: hypotheses for every training turn, from 5 fixed demos.
backend = OracleNoiseBackend(gold_tlb_map(train), p=0.3, seed=3, schema=schema)
collection = collect_demonstrations(train, backend, schema, cfg)
print("fixed demos:", list(collection.demo_ids))
golds = dict(iter_training_examples(train, width=1))
wrong = sum(
    1 for record in collection.hypotheses.values()
    if record.tlb is not None and record.tlb != golds[record.example_id].gold_tlb
)
print(f"collected {len(collection.hypotheses)} hypotheses, {wrong} differ from gold")

# Step 2: correction sequences ending in the gold belief.
embedder = HashEmbeddingBackend(dim=32, seed=0)
index = build_index(iter_training_examples(train, width=1), embedder)
summary = export_training_sequences(train, collection, index, embedder, schema, cfg,
                                    out / "training_sequences.jsonl")
print(f"exported {summary.written} sequences, skipped {summary.skipped}")

first = json.loads((out / "training_sequences.jsonl").read_text().splitlines()[0])
span = first["text"][first["target_start"]:first["target_end"]]
print(f"\nfirst sequence targets {first['example_id']}; span parses to",
      parse_tlb(span).tlb.to_dict())

# Retriever supervision: pairs labeled by gold-belief F1.
count = export_pairs_for_split(train, cfg, out / "retriever_pairs.jsonl")
print(f"\nwrote {count} retriever pairs, e.g.:")
print(" ", (out / "retriever_pairs.jsonl").read_text().splitlines()[0][:120], "...")
