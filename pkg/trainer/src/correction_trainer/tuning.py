"""Correction tuning: adapter-only training on exported sequences.

The base stand-in is quantized and frozen before any gradient step; training
touches nothing but the adapters. Loss defaults to the whole sequence, with
a target-span switch for ablations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .export_check import validate_export
from .modeling import PAD_ID, PRESETS, ModelConfig, StandInDecoder
from .tokenizer import encode, token_span


class SequenceTooLongError(ValueError):
    def __init__(self, example_id: str, length: int, limit: int):
        self.example_id = example_id
        super().__init__(
            f"sequence {example_id!r} holds {length} tokens, over the {limit}-token context"
        )


@dataclass(frozen=True)
class CorrectionTuneJob:
    sequences_path: str
    output_dir: str
    base_model: str = "standin-tiny"
    lora_rank: int | None = None
    lora_alpha: float | None = None
    lora_dropout: float | None = None
    quant_bits: int = 8
    loss_scope: str = "full_sequence"  # or "target_span"
    steps: int = 200
    batch_size: int = 0  # 0 means full batch
    learning_rate: float = 5e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss_scope not in ("full_sequence", "target_span"):
            raise ValueError(f"loss_scope must be full_sequence or target_span, got {self.loss_scope!r}")
        if self.base_model not in PRESETS:
            raise ValueError(f"unknown base model {self.base_model!r}; options: {sorted(PRESETS)}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def model_config(self) -> ModelConfig:
        base = PRESETS[self.base_model]
        overrides = {}
        if self.lora_rank is not None:
            overrides["lora_rank"] = self.lora_rank
        if self.lora_alpha is not None:
            overrides["lora_alpha"] = self.lora_alpha
        if self.lora_dropout is not None:
            overrides["lora_dropout"] = self.lora_dropout
        overrides["quant_bits"] = self.quant_bits
        from dataclasses import replace

        return replace(base, **overrides)


def load_sequences(path: str | Path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def make_batch(records: list[dict], loss_scope: str, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded id tensor plus the per-position loss mask."""
    encoded = []
    for record in records:
        ids = encode(record["text"])
        if len(ids) > max_len:
            raise SequenceTooLongError(record["example_id"], len(ids), max_len)
        encoded.append(ids)
    width = max(len(ids) for ids in encoded)
    batch = torch.full((len(encoded), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(encoded), width), dtype=torch.bool)
    for row, (record, ids) in enumerate(zip(records, encoded)):
        batch[row, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        if loss_scope == "full_sequence":
            mask[row, :len(ids)] = True
        else:
            start, end = token_span(record["text"], record["target_start"],
                                    record["target_end"])
            mask[row, start:end] = True
    return batch, mask


def dataset_loss(model: StandInDecoder, batch: torch.Tensor, mask: torch.Tensor,
                 chunk: int = 32) -> float:
    model.eval()
    losses = []
    weights = []
    with torch.no_grad():
        for i in range(0, batch.shape[0], chunk):
            rows = batch[i:i + chunk]
            rows_mask = mask[i:i + chunk]
            losses.append(model.loss(rows, rows_mask).item())
            weights.append(int(rows_mask[:, 1:].sum()))
    total = sum(w for w in weights)
    return sum(l * w for l, w in zip(losses, weights)) / total


def masked_perplexity(model: StandInDecoder, batch: torch.Tensor,
                      mask: torch.Tensor) -> float:
    return math.exp(dataset_loss(model, batch, mask))


def correction_tune(job: CorrectionTuneJob) -> dict:
    """Train adapters on an export; returns the manifest (also written to disk).

    The output directory receives ``adapter.pt`` (adapter weights only) and
    ``manifest.json`` with the config, seed, loss curve, parameter counts,
    and the frozen-base checksum taken before and after training.
    """
    report = validate_export(job.sequences_path)
    if report.kind != "sequences":
        raise ValueError(f"correction tuning needs a sequences export, got {report.kind}")
    records = load_sequences(job.sequences_path)

    torch.manual_seed(job.seed)
    config = job.model_config()
    model = StandInDecoder(config, seed=job.seed)
    checksum_before = model.base_checksum()

    batch, mask = make_batch(records, job.loss_scope, config.max_len)
    initial_loss = dataset_loss(model, batch, mask)

    params = model.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=job.learning_rate)
    schedule = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: 0.5 * (1 + math.cos(math.pi * step / job.steps))
    )
    rng = torch.Generator().manual_seed(job.seed)
    curve: list[float] = []
    model.train()
    for _step in range(job.steps):
        if job.batch_size and job.batch_size < batch.shape[0]:
            rows = torch.randperm(batch.shape[0], generator=rng)[:job.batch_size]
            step_batch, step_mask = batch[rows], mask[rows]
        else:
            step_batch, step_mask = batch, mask
        optimizer.zero_grad()
        loss = model.loss(step_batch, step_mask)
        loss.backward()
        optimizer.step()
        schedule.step()
        curve.append(float(loss.item()))

    final_loss = dataset_loss(model, batch, mask)
    checksum_after = model.base_checksum()

    out = Path(job.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    adapter_state = {
        name: param.detach().cpu()
        for name, param in model.named_parameters()
        if param.requires_grad
    }
    torch.save(adapter_state, out / "adapter.pt")
    manifest = {
        "job": {
            "sequences_path": str(job.sequences_path),
            "base_model": job.base_model,
            "loss_scope": job.loss_scope,
            "steps": job.steps,
            "batch_size": job.batch_size,
            "learning_rate": job.learning_rate,
            "seed": job.seed,
            "quant_bits": job.quant_bits,
            "lora_rank": config.lora_rank,
            "lora_alpha": config.lora_alpha,
            "lora_dropout": config.lora_dropout,
        },
        "sequences": len(records),
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "loss_curve": curve[:: max(1, len(curve) // 50)],
        "base_checksum_before": checksum_before,
        "base_checksum_after": checksum_after,
        "base_parameters": model.base_parameter_count(),
        "adapter_parameters": model.adapter_parameter_count(),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if checksum_before != checksum_after:
        raise AssertionError("frozen base weights changed during training")
    return manifest
