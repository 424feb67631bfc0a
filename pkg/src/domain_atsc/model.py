"""Small BERT-style encoder with MLM, NSP and 3-way ATSC heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GraphConsumed, NoMaskedPositions, ShapeMismatch

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 2
    ff_dim: int = 128
    vocab_size: int = 8192
    max_len: int = 128
    num_segments: int = 2
    num_classes: int = 3
    dropout: float = 0.0

    def __post_init__(self) -> None:
        dims = (self.num_layers, self.hidden_dim, self.num_heads, self.ff_dim,
                self.vocab_size, self.max_len, self.num_segments, self.num_classes)
        if min(dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def bert_base(cls, vocab_size: int = 30522) -> "EncoderConfig":
        return cls(12, 768, 12, 3072, vocab_size, 512)


@dataclass
class EncoderOutput:
    hidden: torch.Tensor  # (..., seq_len, hidden_dim)
    h_cls: torch.Tensor  # (..., hidden_dim)
    attentions: list[torch.Tensor] | None = None


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.hidden_dim // cfg.num_heads
        self.query = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.key = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.value = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self._heads(self.query(x)), self._heads(self.key(x)), self._heads(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        ctx = self.dropout(probs) @ v
        b, _, t, _ = ctx.shape
        return self.out(ctx.transpose(1, 2).reshape(b, t, -1)), probs


class EncoderLayer(nn.Module):
    """Post-LN transformer block with a GELU feed-forward."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(cfg)
        self.attn_norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-12)
        self.ff_in = nn.Linear(cfg.hidden_dim, cfg.ff_dim)
        self.ff_out = nn.Linear(cfg.ff_dim, cfg.hidden_dim)
        self.ff_norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-12)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn, probs = self.attention(x, key_mask)
        x = self.attn_norm(x + self.dropout(attn))
        ff = self.ff_out(F.gelu(self.ff_in(x)))
        return self.ff_norm(x + self.dropout(ff)), probs


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.token_embedding = nn.Parameter(torch.empty(config.vocab_size, h))
        self.position_embedding = nn.Parameter(torch.empty(config.max_len, h))
        self.segment_embedding = nn.Parameter(torch.empty(config.num_segments, h))
        self.embedding_norm = nn.LayerNorm(h, eps=1e-12)
        self.embedding_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        # MLM projection is tied to token_embedding; only its bias is separate
        self.mlm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.nsp_head = nn.Linear(h, 2)
        self.cls_head = nn.Linear(h, config.num_classes)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm.weight"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)

    def _check(self, input_ids: torch.Tensor, segment_ids: torch.Tensor,
               attention_mask: torch.Tensor | None) -> None:
        cfg = self.config
        if input_ids.shape != segment_ids.shape:
            raise ShapeMismatch(f"input_ids {tuple(input_ids.shape)} vs segment_ids {tuple(segment_ids.shape)}")
        if attention_mask is not None and attention_mask.shape != input_ids.shape:
            raise ShapeMismatch("attention_mask shape differs from input_ids")
        if input_ids.dim() != 2 or input_ids.shape[1] == 0:
            raise ShapeMismatch("expected (batch, seq_len) ids with seq_len >= 1")
        if input_ids.shape[1] > cfg.max_len:
            raise ShapeMismatch(f"sequence length {input_ids.shape[1]} exceeds max_len {cfg.max_len}")
        if input_ids.numel() and (input_ids.max() >= cfg.vocab_size or input_ids.min() < 0):
            raise ShapeMismatch("token id outside vocabulary")
        if segment_ids.numel() and (segment_ids.max() >= cfg.num_segments or segment_ids.min() < 0):
            raise ShapeMismatch("segment id out of range")

    def forward(self, input_ids, segment_ids, attention_mask=None,
                return_attentions: bool = False) -> EncoderOutput:
        input_ids = torch.as_tensor(input_ids, dtype=torch.long)
        segment_ids = torch.as_tensor(segment_ids, dtype=torch.long)
        if attention_mask is not None:
            attention_mask = torch.as_tensor(attention_mask, dtype=torch.bool)
        single = input_ids.dim() == 1
        if single:
            input_ids, segment_ids = input_ids[None], segment_ids[None]
            attention_mask = None if attention_mask is None else attention_mask[None]
        self._check(input_ids, segment_ids, attention_mask)
        if attention_mask is None:
            attention_mask = input_ids != 0
        t = input_ids.shape[1]
        x = (self.token_embedding[input_ids] + self.position_embedding[:t][None]
             + self.segment_embedding[segment_ids])
        x = self.embedding_dropout(self.embedding_norm(x))
        attentions = []
        for layer in self.layers:
            x, probs = layer(x, attention_mask)
            attentions.append(probs)
        if single:
            x = x[0]
            attentions = [a[0] for a in attentions]
        return EncoderOutput(x, x[..., 0, :], attentions if return_attentions else None)

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.token_embedding.T + self.mlm_bias

    def nsp_logits(self, h_cls: torch.Tensor) -> torch.Tensor:
        return self.nsp_head(h_cls)

    @property
    def dtype(self) -> torch.dtype:
        return self.token_embedding.dtype


def forward(model: EncoderModel, input_ids, segment_ids, attention_mask=None) -> EncoderOutput:
    return model(input_ids, segment_ids, attention_mask)


def classify_atsc(model: EncoderModel, output: EncoderOutput) -> torch.Tensor:
    """p = softmax(W h_cls + b), classes ordered (positive, negative, neutral)."""
    return torch.softmax(model.cls_head(output.h_cls), dim=-1)


def _floored_nll(log_probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -picked.clamp_min(_LOG_FLOOR)


def loss_atsc(p: torch.Tensor, label) -> torch.Tensor:
    """-ln p[label] with p floored at 1e-12; batched inputs are mean-reduced."""
    label = torch.as_tensor(label, dtype=torch.long)
    return -p.gather(-1, label.unsqueeze(-1)).squeeze(-1).clamp_min(PROB_FLOOR).log().mean()


@dataclass
class LmBatch:
    input_ids: torch.Tensor
    segment_ids: torch.Tensor
    attention_mask: torch.Tensor
    mlm_rows: torch.Tensor
    mlm_cols: torch.Tensor
    mlm_labels: torch.Tensor
    nsp_labels: torch.Tensor
    num_sentences: int


def collate_lm(batch: Sequence, pad_id: int = 0) -> LmBatch:
    """Stack MaskedPairExamples, trimming shared padding beyond the longest real sequence."""
    width = max(ex.num_tokens for ex in batch)
    ids = torch.tensor([ex.input_ids[:width] for ex in batch], dtype=torch.long)
    segs = torch.tensor([ex.segment_ids[:width] for ex in batch], dtype=torch.long)
    mask = torch.tensor([[i < ex.num_tokens for i in range(width)] for ex in batch])
    rows = [r for r, ex in enumerate(batch) for _ in ex.mlm_positions]
    cols = [p for ex in batch for p in ex.mlm_positions]
    labels = [l for ex in batch for l in ex.mlm_labels]
    return LmBatch(ids, segs, mask, torch.tensor(rows, dtype=torch.long), torch.tensor(cols, dtype=torch.long),
                   torch.tensor(labels, dtype=torch.long),
                   torch.tensor([int(ex.nsp_label) for ex in batch], dtype=torch.long),
                   sum(ex.num_sentences for ex in batch))


def lm_loss_parts(model: EncoderModel, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean MLM cross-entropy over masked positions, mean NSP cross-entropy)."""
    if not isinstance(batch, LmBatch):
        if not batch:
            raise ValueError("empty batch")
        batch = collate_lm(batch)
    if batch.mlm_labels.numel() == 0:
        raise NoMaskedPositions("batch contains no masked positions")
    out = model(batch.input_ids, batch.segment_ids, batch.attention_mask)
    masked_hidden = out.hidden[batch.mlm_rows, batch.mlm_cols]
    mlm = _floored_nll(torch.log_softmax(model.mlm_logits(masked_hidden), -1), batch.mlm_labels).mean()
    nsp = _floored_nll(torch.log_softmax(model.nsp_logits(out.h_cls), -1), batch.nsp_labels).mean()
    return mlm, nsp


def loss_lm(model: EncoderModel, batch) -> torch.Tensor:
    mlm, nsp = lm_loss_parts(model, batch)
    return mlm + nsp


def backward(model: EncoderModel, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of `loss` for every named parameter (zeros where the loss does not depend on it)."""
    if getattr(loss, "_graph_consumed", False):
        raise GraphConsumed("backward already ran on this loss; run forward again")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    loss._graph_consumed = True
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}
