"""Encoder fine-tuning on similarity-labeled text pairs.

The objective regresses the cosine of the two encodings toward the label,
so texts whose gold beliefs overlap end up close in embedding space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .encoder import TinyTextEncoder
from .export_check import validate_export


@dataclass(frozen=True)
class RetrieverTrainJob:
    pairs_path: str
    output_dir: str
    dim: int = 64
    epochs: int = 50
    learning_rate: float = 1e-2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def load_pairs(path: str | Path) -> list[dict]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            pairs.append(json.loads(line))
    return pairs


def _dataset_loss(encoder: TinyTextEncoder, pairs: list[dict]) -> float:
    with torch.no_grad():
        anchors = [p["anchor_text"] for p in pairs]
        candidates = [p["candidate_text"] for p in pairs]
        labels = torch.tensor([float(p["label"]) for p in pairs])
        cosines = encoder.cosine(anchors, candidates)
        return float(((cosines - labels) ** 2).mean())


def finetune_retriever(job: RetrieverTrainJob) -> dict:
    """Train the encoder on a pairs export; returns the manifest.

    The output directory receives ``encoder.pt``, ``config.json``, and
    ``manifest.json`` with the initial and final loss.
    """
    report = validate_export(job.pairs_path)
    if report.kind != "pairs":
        raise ValueError(f"retriever tuning needs a pairs export, got {report.kind}")
    pairs = load_pairs(job.pairs_path)

    torch.manual_seed(job.seed)
    encoder = TinyTextEncoder(dim=job.dim, seed=job.seed)
    initial_loss = _dataset_loss(encoder, pairs)

    optimizer = torch.optim.Adam(encoder.parameters(), lr=job.learning_rate)
    rng = torch.Generator().manual_seed(job.seed)
    curve = []
    for _epoch in range(job.epochs):
        order = torch.randperm(len(pairs), generator=rng).tolist()
        for start in range(0, len(order), job.batch_size):
            chunk = [pairs[i] for i in order[start:start + job.batch_size]]
            labels = torch.tensor([float(p["label"]) for p in chunk])
            optimizer.zero_grad()
            cosines = encoder.cosine([p["anchor_text"] for p in chunk],
                                     [p["candidate_text"] for p in chunk])
            loss = ((cosines - labels) ** 2).mean()
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise RuntimeError("training loss became non-finite")
            loss.backward()
            optimizer.step()
            curve.append(loss_value)

    final_loss = _dataset_loss(encoder, pairs)
    out = Path(job.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(encoder.state_dict(), out / "encoder.pt")
    (out / "config.json").write_text(
        json.dumps({"dim": job.dim, "kind": "tiny-byte-encoder"}, indent=2) + "\n",
        encoding="utf-8",
    )
    manifest = {
        "job": {
            "pairs_path": str(job.pairs_path),
            "dim": job.dim,
            "epochs": job.epochs,
            "learning_rate": job.learning_rate,
            "batch_size": job.batch_size,
            "seed": job.seed,
        },
        "pairs": len(pairs),
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "loss_curve": curve[:: max(1, len(curve) // 50)],
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest
