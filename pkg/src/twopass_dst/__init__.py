"""Two-pass dialogue state tracking with retrieval-augmented self-correction.

The package is organized as a library: data model (`states`, `schema`,
`datasets`), scoring (`metrics`), prompt rendering and parsing (`prompts`),
exemplar retrieval (`retrieval`), completion backends with cost accounting
(`backends`), run orchestration (`pipeline`), and a stage-wise CLI (`cli`).
"""

from .backends import (
    CompletionRequest,
    CompletionResponse,
    CostLedger,
    EchoHypothesisBackend,
    HttpBackend,
    HttpBackendConfig,
    OracleNoiseBackend,
    RecordBackend,
    ReplayBackend,
    estimate_flops,
    oracle_noise_complete,
)
from .datasets import DatasetSplit, load_dataset, sample_low_resource, write_dataset
from .metrics import (
    DomainCategory,
    MetricsReport,
    SynonymTable,
    TurnRecord,
    breakdown_by_category,
    categorize_dialogue,
    evaluate_run,
    joint_goal,
    pair_matches,
    set_f1,
)
from .pipeline import (
    BackendSpec,
    EmbeddingSpec,
    PredictionRecord,
    RunConfig,
    Seeds,
    collect_demonstrations,
    export_training_sequences,
    first_pass_dialogue,
    run_experiment,
    second_pass_dialogue,
)
from .prompts import (
    Exemplar,
    ParseResult,
    PromptStyle,
    RenderedPrompt,
    build_correction_prompt,
    build_inference_prompt,
    estimate_tokens,
    parse_tlb,
    render_schema,
    render_tlb,
    render_training_sequence,
)
from .retrieval import (
    HashEmbeddingBackend,
    HttpEmbeddingBackend,
    Index,
    IndexEntry,
    RetrievalResult,
    build_index,
    export_retriever_pairs,
    retrieve,
    serialize_for_embedding,
    similarity_label,
)
from .schema import SchemaTable, SlotSpec, load_schema
from .states import (
    ContextWindow,
    Dialogue,
    DialogueState,
    SlotValuePair,
    Turn,
    TurnBelief,
    accumulate,
    aggregate_state,
    context_window,
    normalize_value,
)

__version__ = "0.1.0"
