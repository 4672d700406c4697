"""Per-item fusion of the collaborative embedding with the adapted semantic
embedding: gated (default), weighted, concatenation, and cross-attention."""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ConfigError, FUSION_STRATEGIES, FusionSettings


def _check_same_width(e_id: torch.Tensor, e_sem: torch.Tensor) -> None:
    if e_id.shape != e_sem.shape:
        raise ValueError(f"fusion inputs must share a shape, got {tuple(e_id.shape)} "
                         f"vs {tuple(e_sem.shape)}")


def fuse_gated(e_id: torch.Tensor, e_sem_adapted: torch.Tensor,
               weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Elementwise convex combination with gate sigmoid(W [e_id; e_sem] + b)."""
    _check_same_width(e_id, e_sem_adapted)
    gamma = torch.sigmoid(torch.cat([e_id, e_sem_adapted], dim=-1) @ weight.T + bias)
    return gamma * e_id + (1.0 - gamma) * e_sem_adapted


def fuse_weighted(e_id: torch.Tensor, e_sem_adapted: torch.Tensor, alpha: float) -> torch.Tensor:
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"weighted fusion alpha must be in [0, 1], got {alpha}")
    _check_same_width(e_id, e_sem_adapted)
    return alpha * e_id + (1.0 - alpha) * e_sem_adapted


def fuse_concat(e_id: torch.Tensor, e_sem_adapted: torch.Tensor,
                proj: torch.Tensor) -> torch.Tensor:
    """Learned projection of the concatenated views: proj @ [e_id; e_sem]."""
    _check_same_width(e_id, e_sem_adapted)
    if proj.shape[1] != 2 * e_id.shape[-1]:
        raise ValueError(f"concat projection expects width {2 * e_id.shape[-1]}, "
                         f"got {proj.shape[1]}")
    return torch.cat([e_id, e_sem_adapted], dim=-1) @ proj.T


class GatedFusion(nn.Module):
    def __init__(self, d: int, bias_init: float = 0.0):
        super().__init__()
        self.gate = nn.Linear(2 * d, d)
        nn.init.constant_(self.gate.bias, bias_init)

    def forward(self, e_id, e_sem_adapted):
        return fuse_gated(e_id, e_sem_adapted, self.gate.weight, self.gate.bias)


class WeightedFusion(nn.Module):
    """Scalar convex mix; alpha is a learned sigmoid-squashed scalar unless
    the config fixes it."""

    def __init__(self, alpha: float = 0.5, learnable: bool = True):
        super().__init__()
        if not (0.0 <= alpha <= 1.0):
            raise ConfigError(f"weighted fusion alpha must be in [0, 1], got {alpha}")
        self.learnable = learnable
        if learnable:
            eps = 1e-6
            squeezed = min(max(alpha, eps), 1.0 - eps)
            raw = math.log(squeezed / (1.0 - squeezed))
            self.raw_alpha = nn.Parameter(torch.tensor(raw))
        else:
            self.register_buffer("fixed_alpha", torch.tensor(float(alpha)))

    def alpha(self) -> torch.Tensor:
        if self.learnable:
            return torch.sigmoid(self.raw_alpha)
        return self.fixed_alpha

    def forward(self, e_id, e_sem_adapted):
        _check_same_width(e_id, e_sem_adapted)
        a = self.alpha()
        return a * e_id + (1.0 - a) * e_sem_adapted


class ConcatFusion(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(2 * d, d, bias=False)

    def forward(self, e_id, e_sem_adapted):
        return fuse_concat(e_id, e_sem_adapted, self.proj.weight)


class CrossAttentionFusion(nn.Module):
    """Scaled dot-product attention with e_id as the query over the two-element
    key/value set {e_id, e_sem}, then a residual add and layer normalization."""

    def __init__(self, d: int, heads: int = 1):
        super().__init__()
        if heads < 1 or d % heads != 0:
            raise ConfigError(f"cross-attention heads must divide d ({d}), got {heads}")
        self.d = d
        self.heads = heads
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.norm = nn.LayerNorm(d)

    def forward(self, e_id, e_sem_adapted):
        _check_same_width(e_id, e_sem_adapted)
        head_dim = self.d // self.heads
        lead = e_id.shape[:-1]
        q = self.q_proj(e_id).reshape(*lead, self.heads, 1, head_dim)
        kv_in = torch.stack([e_id, e_sem_adapted], dim=-2)          # (..., 2, d)
        k = self.k_proj(kv_in).reshape(*lead, 2, self.heads, head_dim).transpose(-3, -2)
        v = self.v_proj(kv_in).reshape(*lead, 2, self.heads, head_dim).transpose(-3, -2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(head_dim)    # (..., heads, 1, 2)
        attn = torch.softmax(scores, dim=-1)
        attended = (attn @ v).squeeze(-2).reshape(*lead, self.d)
        return self.norm(e_id + attended)


def build_fusion(settings: FusionSettings, d: int) -> nn.Module:
    if settings.strategy not in FUSION_STRATEGIES:
        raise ConfigError(f"fusion.strategy must be one of {FUSION_STRATEGIES}, "
                          f"got {settings.strategy!r}")
    if settings.strategy == "gated":
        return GatedFusion(d, bias_init=settings.gate_bias_init)
    if settings.strategy == "weighted":
        return WeightedFusion(alpha=settings.weighted_alpha,
                              learnable=settings.weighted_alpha_learnable)
    if settings.strategy == "concat":
        return ConcatFusion(d)
    return CrossAttentionFusion(d, heads=settings.ca_heads)
