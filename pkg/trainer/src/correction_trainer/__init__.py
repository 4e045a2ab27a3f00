"""Offline tuning on exported JSONL artifacts.

This package deliberately does not import the pipeline that produces the
files; the JSONL schemas are the whole contract. It covers two jobs:
fine-tuning a small text encoder on similarity-labeled pairs, and
parameter-efficient correction tuning of a quantized stand-in decoder on
correction-augmented sequences.
"""

from .export_check import ExportReport, SchemaError, validate_export
from .retriever_tune import RetrieverTrainJob, finetune_retriever
from .tuning import CorrectionTuneJob, correction_tune

__all__ = [
    "CorrectionTuneJob",
    "ExportReport",
    "RetrieverTrainJob",
    "SchemaError",
    "correction_tune",
    "finetune_retriever",
    "validate_export",
]
