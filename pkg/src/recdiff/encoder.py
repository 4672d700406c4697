"""Causal self-attention sequence encoder over fused item embeddings, plus
the dot-product scoring head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class EncoderSettings:
    d: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    max_len: int = 51

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"encoder width {self.d} must be divisible by heads {self.heads}")


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.attn_dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        bsz, seq_len, _ = x.shape
        q = self.q_proj(x).view(bsz, seq_len, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(bsz, seq_len, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(bsz, seq_len, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores + causal_mask          # (L, L) additive, -inf above diagonal
        weights = self.attn_dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(bsz, seq_len, self.d)
        return self.out_proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.attn = CausalSelfAttention(d, heads, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d)
        self.ff2 = nn.Linear(d, d)
        self.act = nn.GELU()
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, causal_mask):
        x = self.norm1(x + self.dropout(self.attn(x, causal_mask)))
        ff = self.ff2(self.dropout(self.act(self.ff1(x))))
        return self.norm2(x + self.dropout(ff))


class SequenceEncoder(nn.Module):
    """Maps a right-padded batch of fused item embeddings to per-position
    hidden states; the sequence summary is the state at the last real item."""

    def __init__(self, settings: EncoderSettings):
        super().__init__()
        self.settings = settings
        self.pos_emb = nn.Embedding(settings.max_len, settings.d)
        self.input_norm = nn.LayerNorm(settings.d)
        self.input_dropout = nn.Dropout(settings.dropout)
        self.blocks = nn.ModuleList([
            EncoderBlock(settings.d, settings.heads, settings.dropout)
            for _ in range(settings.layers)
        ])

    def forward(self, emb: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """emb: (B, L, d) with padding rows after each sequence's real items;
        lengths: (B,) real lengths. Returns (states (B, L, d), summary (B, d))."""
        bsz, seq_len, _ = emb.shape
        if seq_len > self.settings.max_len:
            raise ValueError(f"sequence length {seq_len} exceeds max_len {self.settings.max_len}")
        if lengths.min().item() < 1:
            raise ValueError("every sequence in a batch needs at least one real item")
        positions = torch.arange(seq_len, device=emb.device)
        x = emb + self.pos_emb(positions)[None, :, :]
        x = self.input_dropout(self.input_norm(x))
        causal_mask = torch.full((seq_len, seq_len), float("-inf"), dtype=emb.dtype,
                                 device=emb.device).triu(diagonal=1)
        for block in self.blocks:
            x = block(x, causal_mask)
        summary = x[torch.arange(bsz, device=emb.device), lengths - 1]
        return x, summary


def score_items(h: torch.Tensor, candidate_embeddings: torch.Tensor) -> torch.Tensor:
    """Dot-product scores of a summary (or batch of summaries) against every
    candidate row."""
    if h.shape[-1] != candidate_embeddings.shape[-1]:
        raise ValueError(f"summary width {h.shape[-1]} does not match candidate width "
                         f"{candidate_embeddings.shape[-1]}")
    return h @ candidate_embeddings.T
