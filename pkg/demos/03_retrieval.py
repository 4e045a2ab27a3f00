"""Exemplar retrieval over the fixture training corpus.

Every training turn is serialized (previous state plus context window),
embedded, and stored in an exhaustive-scan cosine index. The test encoder is
a deterministic hash projection, so this demo runs without any model server.
"""

from pathlib import Path

from twopass_dst import HashEmbeddingBackend, build_index, retrieve, serialize_for_embedding
from twopass_dst.datasets import load_dataset, sample_low_resource
from twopass_dst.pipeline import iter_training_examples
from twopass_dst.schema import load_schema
from twopass_dst.states import ContextWindow, DialogueState

fixtures = Path(__file__).parent.parent / "tests" / "fixtures"
schema = load_schema(fixtures / "schema.json")
train = sample_low_resource(
    load_dataset(fixtures / "train.jsonl", schema, name="train"), 0.2, seed=13
)

backend = HashEmbeddingBackend(dim=32, seed=0)
examples = iter_training_examples(train, width=1)
index = build_index(examples, backend)
print(f"indexed {len(index)} training turns from {len(train.dialogues)} dialogues")

# Query with a made-up turn: the serialization is the retrieval key.
state = DialogueState.from_dict({"hotel-area": "east"})
ctx = ContextWindow((("noted. hotel-area is east", "i also want 4 stars"),))
query_text = serialize_for_embedding(state, ctx)
print("\nquery:", query_text)

result = retrieve(index, backend.embed(query_text), k=5)
print("\ntop neighbors:")
for entry, score in result.hits:
    print(f"  {score:+.4f}  {entry.example_id:14}  gold {entry.payload.gold_tlb.to_dict()}")

# Self-retrieval sanity: a stored turn is its own nearest neighbor.
first_id, first_payload = examples[0]
own_query = backend.embed(serialize_for_embedding(first_payload.prev_state, first_payload.ctx))
print("\nself lookup:", retrieve(index, own_query, k=1).ids(), "==", first_id)
