"""A very small text encoder: byte embeddings, mean pooling, projection.

Enough capacity to overfit small supervision sets, and the artifact format
(state dict plus config JSON) is easy to host behind any embedding endpoint.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

BYTE_VOCAB = 256


class TinyTextEncoder(nn.Module):
    def __init__(self, dim: int = 64, hidden: int = 128, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.embed = nn.Embedding(BYTE_VOCAB, hidden)
        self.proj = nn.Linear(hidden, dim)
        with torch.no_grad():
            nn.init.normal_(self.embed.weight, std=0.05, generator=generator)
            nn.init.normal_(self.proj.weight, std=hidden ** -0.5, generator=generator)
            self.proj.bias.zero_()

    @staticmethod
    def batch_ids(texts: list[str], max_len: int = 512) -> torch.Tensor:
        rows = [list(t.encode("utf-8"))[:max_len] or [0] for t in texts]
        width = max(len(r) for r in rows)
        out = torch.zeros(len(rows), width, dtype=torch.long)
        lengths = torch.zeros(len(rows), 1)
        for i, row in enumerate(rows):
            out[i, :len(row)] = torch.tensor(row, dtype=torch.long)
            lengths[i] = len(row)
        return out, lengths

    def forward(self, texts: list[str]) -> torch.Tensor:
        ids, lengths = self.batch_ids(texts)
        mask = (torch.arange(ids.shape[1])[None, :] < lengths).float()
        pooled = (self.embed(ids) * mask.unsqueeze(-1)).sum(dim=1) / lengths
        return F.normalize(self.proj(pooled), dim=-1)

    def cosine(self, a: list[str], b: list[str]) -> torch.Tensor:
        return (self.forward(a) * self.forward(b)).sum(dim=-1)
