"""Causal language models for desk-scale training.

`toy[:preset]` identifiers build a small in-repo transformer with fresh
embeddings over the manifest vocabulary. Any other identifier is treated as a
local path loadable by `transformers`; its embeddings are resized to the
manifest tokenizer, which is fine at desk scale (synthetic tasks gain nothing
from pretrained token alignment) and keeps one data pipeline for all models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F


class ModelLoadError(Exception):
    pass


@dataclass(frozen=True)
class ToyConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 512
    dropout: float = 0.0


TOY_PRESETS = {
    "small": dict(d_model=128, n_heads=4, n_layers=2),
    "mini": dict(d_model=64, n_heads=2, n_layers=2),
}


class Block(nn.Module):
    def __init__(self, config: ToyConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = nn.MultiheadAttention(
            config.d_model, config.n_heads, dropout=config.dropout, batch_first=True
        )
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, 4 * config.d_model),
            nn.GELU(),
            nn.Linear(4 * config.d_model, config.d_model),
        )

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        attn_out, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + attn_out
        return x + self.mlp(self.ln2(x))


class TinyCausalLM(nn.Module):
    def __init__(self, config: ToyConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        _, seq_len = input_ids.shape
        if seq_len > self.config.max_seq_len:
            raise ValueError(f"sequence length {seq_len} exceeds {self.config.max_seq_len}")
        positions = torch.arange(seq_len, device=input_ids.device)
        x = self.tok_emb(input_ids) + self.pos_emb(positions)[None, :, :]
        mask = torch.triu(
            torch.full((seq_len, seq_len), float("-inf"), device=input_ids.device), diagonal=1
        )
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_f(x))


class HFCausalLM(nn.Module):
    """Adapter around a transformers causal LM exposing bare logits."""

    def __init__(self, model: nn.Module):
        super().__init__()
        self.model = model

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        return self.model(input_ids=input_ids).logits


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# Low-rank adaptation

class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.zeros(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.scale = alpha / rank
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.dropout(x) @ self.lora_a.T @ self.lora_b.T * self.scale


@dataclass(frozen=True)
class LoraSettings:
    rank: int = 64
    alpha: float = 128.0
    dropout: float = 0.05


def apply_lora(model: nn.Module, settings: LoraSettings) -> nn.Module:
    """Freeze the model and wrap plain Linear layers in LoRA adapters.

    MultiheadAttention internals are left alone (the module reads its
    projections by attribute, so they cannot be swapped for wrappers)."""
    for param in model.parameters():
        param.requires_grad_(False)

    def wrap(module: nn.Module) -> None:
        for name, child in module.named_children():
            if isinstance(child, nn.MultiheadAttention):
                continue
            if isinstance(child, nn.Linear):
                setattr(module, name, LoRALinear(child, settings.rank, settings.alpha, settings.dropout))
            elif not isinstance(child, LoRALinear):
                wrap(child)

    wrap(model)
    return model


# ---------------------------------------------------------------------------
# Loading

def load_model(identifier: str, vocab_size: int, max_seq_len: int) -> nn.Module:
    """`toy` / `toy:<preset>` builds the in-repo transformer; anything else is
    loaded through transformers from a local path."""
    if identifier == "toy" or identifier.startswith("toy:"):
        preset = identifier.partition(":")[2] or "small"
        if preset not in TOY_PRESETS:
            raise ModelLoadError(f"unknown toy preset {preset!r} (have {sorted(TOY_PRESETS)})")
        config = ToyConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, **TOY_PRESETS[preset])
        return TinyCausalLM(config)

    try:
        from transformers import AutoModelForCausalLM
    except ImportError as exc:
        raise ModelLoadError("transformers is required for non-toy model identifiers") from exc
    try:
        hf_model = AutoModelForCausalLM.from_pretrained(identifier)
    except Exception as exc:
        raise ModelLoadError(f"could not load model {identifier!r}: {exc}") from exc
    hf_model.resize_token_embeddings(vocab_size)
    return HFCausalLM(hf_model)


def save_artifact(model: nn.Module, tokenizer_json: str, spec_meta: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / "model.pt")
    (out_dir / "tokenizer.json").write_text(tokenizer_json, encoding="utf-8")
    (out_dir / "train_spec.json").write_text(json.dumps(spec_meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def sequence_loss(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Next-token cross-entropy over supervised positions; returns the summed
    loss and the number of supervised tokens."""
    shifted_logits = logits[:, :-1, :].reshape(-1, logits.size(-1))
    shifted_labels = labels[:, 1:].reshape(-1)
    n_tokens = int((shifted_labels != -100).sum().item())
    if n_tokens == 0:
        return logits.sum() * 0.0, 0
    loss = F.cross_entropy(shifted_logits, shifted_labels, ignore_index=-100, reduction="sum")
    return loss, n_tokens
