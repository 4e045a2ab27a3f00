"""A small causal decoder with a quantized, frozen base and LoRA adapters.

The base weights are initialized from a seed, quantized to int8 per output
channel, and stored as buffers; only the rank-``r`` adapter matrices are
torch Parameters. That keeps the frozen-base contract checkable: hashing
the buffers before and after training must give the same digest, and every
trainable parameter name contains "lora".
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import VOCAB_SIZE

PAD_ID = VOCAB_SIZE  # one past BOS
MODEL_VOCAB = VOCAB_SIZE + 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 512
    lora_rank: int = 4
    lora_alpha: float = 16.0
    lora_dropout: float = 0.0
    quant_bits: int = 8

    def __post_init__(self) -> None:
        if self.quant_bits != 8:
            raise ValueError(f"only 8-bit quantization is implemented, got {self.quant_bits}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must divide evenly into heads")


PRESETS = {
    "standin-tiny": ModelConfig(),
    "standin-small": ModelConfig(d_model=256, n_layers=2, n_heads=4, d_ff=512,
                                 lora_rank=8),
}


class QuantLinear(nn.Module):
    """Frozen int8 linear plus a trainable low-rank update."""

    def __init__(self, in_features: int, out_features: int, cfg: ModelConfig,
                 generator: torch.Generator):
        super().__init__()
        weight = torch.empty(out_features, in_features)
        nn.init.normal_(weight, std=in_features ** -0.5, generator=generator)
        scale = weight.abs().amax(dim=1).clamp(min=1e-8) / 127.0
        self.register_buffer("weight_q", torch.round(weight / scale[:, None]).to(torch.int8))
        self.register_buffer("scale", scale)
        self.register_buffer("bias", torch.zeros(out_features))
        rank = cfg.lora_rank
        self.lora_a = nn.Parameter(torch.empty(rank, in_features))
        self.lora_b = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.normal_(self.lora_a, std=rank ** -0.5, generator=generator)
        self.scaling = cfg.lora_alpha / rank
        self.dropout = nn.Dropout(cfg.lora_dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = self.weight_q.float() * self.scale[:, None]
        out = F.linear(x, weight, self.bias)
        delta = F.linear(F.linear(self.dropout(x), self.lora_a), self.lora_b)
        return out + delta * self.scaling


class LoRAEmbedding(nn.Module):
    """Frozen embedding table plus a trainable low-rank update."""

    def __init__(self, vocab: int, dim: int, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        table = torch.empty(vocab, dim)
        nn.init.normal_(table, std=0.02, generator=generator)
        self.register_buffer("table", table)
        rank = cfg.lora_rank
        self.lora_a = nn.Parameter(torch.empty(vocab, rank))
        self.lora_b = nn.Parameter(torch.zeros(rank, dim))
        nn.init.normal_(self.lora_a, std=0.02, generator=generator)
        self.scaling = cfg.lora_alpha / rank

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        base = F.embedding(ids, self.table)
        delta = F.embedding(ids, self.lora_a) @ self.lora_b
        return base + delta * self.scaling


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.qkv = QuantLinear(cfg.d_model, 3 * cfg.d_model, cfg, generator)
        self.proj = QuantLinear(cfg.d_model, cfg.d_model, cfg, generator)
        self.up = QuantLinear(cfg.d_model, cfg.d_ff, cfg, generator)
        self.down = QuantLinear(cfg.d_ff, cfg.d_model, cfg, generator)
        for layer_norm in (self.ln1, self.ln2):
            for param in layer_norm.parameters():
                param.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, dim = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(dim, dim=2)
        heads = self.n_heads

        def shape(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, length, heads, dim // heads).transpose(1, 2)

        attended = F.scaled_dot_product_attention(shape(q), shape(k), shape(v),
                                                  is_causal=True)
        attended = attended.transpose(1, 2).reshape(batch, length, dim)
        x = x + self.proj(attended)
        x = x + self.down(F.gelu(self.up(self.ln2(x))))
        return x


class StandInDecoder(nn.Module):
    """Byte-level causal LM used as the tuning stand-in."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        generator = torch.Generator().manual_seed(seed)
        self.tok = LoRAEmbedding(MODEL_VOCAB, cfg.d_model, cfg, generator)
        positions = torch.empty(cfg.max_len, cfg.d_model)
        nn.init.normal_(positions, std=0.02, generator=generator)
        self.register_buffer("pos", positions)
        self.blocks = nn.ModuleList(Block(cfg, generator) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        for param in self.ln_f.parameters():
            param.requires_grad_(False)
        self.head = QuantLinear(cfg.d_model, MODEL_VOCAB, cfg, generator)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        length = ids.shape[1]
        if length > self.cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds context {self.cfg.max_len}")
        x = self.tok(ids) + self.pos[:length]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def loss(self, ids: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
        """Masked next-token cross-entropy; mask marks the target positions."""
        logits = self.forward(ids)[:, :-1]
        targets = ids[:, 1:]
        mask = loss_mask[:, 1:].float()
        per_token = F.cross_entropy(
            logits.reshape(-1, MODEL_VOCAB), targets.reshape(-1), reduction="none"
        ).view_as(mask)
        return (per_token * mask).sum() / mask.sum().clamp(min=1.0)

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        for name, param in self.named_parameters():
            if param.requires_grad:
                if "lora" not in name:
                    raise AssertionError(f"non-adapter parameter is trainable: {name}")
                params.append(param)
        return params

    def base_parameter_count(self) -> int:
        frozen = sum(p.numel() for p in self.parameters() if not p.requires_grad)
        buffers = sum(b.numel() for b in self.buffers())
        return frozen + buffers

    def adapter_parameter_count(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def base_checksum(self) -> str:
        digest = hashlib.sha256()
        named: list[tuple[str, torch.Tensor]] = list(self.named_buffers())
        named += [(n, p) for n, p in self.named_parameters() if not p.requires_grad]
        for name, tensor in sorted(named, key=lambda item: item[0]):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()
