"""A complete two-pass experiment on the fixture corpus.

The inference backend is a gold oracle corrupted 40% of the time; the
correction backend is a perfect oracle. The run splits the training data,
builds the index, collects demonstration hypotheses, exports tuning
sequences, runs both passes, and reports first-pass versus corrected
metrics with the FLOPs ledger.
"""

import tempfile
from pathlib import Path

from twopass_dst.pipeline import BackendSpec, EmbeddingSpec, RunConfig, Seeds, run_experiment
from twopass_dst.prompts import PromptStyle
from twopass_dst.reporting import format_report

fixtures = Path(__file__).parent.parent / "tests" / "fixtures"
output = Path(tempfile.mkdtemp(prefix="twopass_demo_"))

cfg = RunConfig(
    schema_path=str(fixtures / "schema.json"),
    train_path=str(fixtures / "train.jsonl"),
    eval_path=str(fixtures / "eval.jsonl"),
    output_dir=str(output),
    style=PromptStyle.MWOZ_INFERENCE,
    seeds=Seeds(split=13, demos=7, noise=3),
    inference_backend=BackendSpec(kind="oracle_noise", p=0.4, params=8e9),
    correction_backend=BackendSpec(kind="oracle_noise", p=0.0, params=8e9),
    embedding=EmbeddingSpec(kind="hash", dim=32, seed=0),
    fraction=0.2,
    max_concurrency=4,
)

result = run_experiment(cfg)
print(format_report(result.report_final, result.ledger, style="table",
                    first=result.report_first))
print(f"\nartifacts in {output}:")
for path in sorted(output.iterdir()):
    print(f"  {path.name}")
