"""Conditional denoising diffusion over sequence representations: linear
noise schedule, closed-form forward corruption, an intent-conditioned noise
predictor, the denoising loss, and ancestral reverse sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor        # (T,), float64
    alphas: torch.Tensor
    alpha_bars: torch.Tensor   # cumulative products, strictly decreasing

    @property
    def steps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal coefficient; t = 0 is defined as 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def make_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ConfigError(f"diffusion steps must be >= 1, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1, "
                          f"got ({beta_start}, {beta_end})")
    if steps == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def q_sample(x_0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward corruption: sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.

    `t` may be an int applied to the whole batch or a (B,) integer tensor.
    t = 0 returns x_0 exactly.
    """
    if x_0.shape != eps.shape:
        raise ValueError(f"x_0 and eps shapes differ: {tuple(x_0.shape)} vs {tuple(eps.shape)}")
    if isinstance(t, int):
        if not (0 <= t <= schedule.steps):
            raise ValueError(f"t must be in [0, {schedule.steps}], got {t}")
        abar = torch.tensor(schedule.alpha_bar(t), dtype=torch.float64)
    else:
        if t.min().item() < 0 or t.max().item() > schedule.steps:
            raise ValueError(f"t must be in [0, {schedule.steps}], got range "
                             f"[{t.min().item()}, {t.max().item()}]")
        padded = torch.cat([torch.ones(1, dtype=torch.float64),
                            schedule.alpha_bars])                 # index by t directly
        abar = padded[t.long()].view(-1, *([1] * (x_0.ndim - 1)))
    signal = torch.sqrt(abar).to(dtype=x_0.dtype, device=x_0.device)
    noise = torch.sqrt(1.0 - abar).to(dtype=x_0.dtype, device=x_0.device)
    return signal * x_0 + noise * eps


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer step indices, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) *
                      torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.reshape(-1, 1).to(torch.float64) * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=emb.dtype)], dim=-1)
    return emb


class DiffusionDenoiser(nn.Module):
    """Noise predictor: MLP over [x_t ; intent signal ; timestep embedding]."""

    def __init__(self, d: int, hidden_width: int = 128, time_embed_width: int = 32):
        super().__init__()
        self.d = d
        self.time_embed_width = time_embed_width
        self.fc1 = nn.Linear(2 * d + time_embed_width, hidden_width)
        self.fc2 = nn.Linear(hidden_width, hidden_width)
        self.out = nn.Linear(hidden_width, d)
        self.act = nn.GELU()

    def forward(self, x_t: torch.Tensor, s: torch.Tensor, t) -> torch.Tensor:
        single = x_t.ndim == 1
        if single:
            x_t, s = x_t[None, :], s[None, :]
        if x_t.shape[-1] != self.d or s.shape[-1] != self.d:
            raise ValueError(f"denoiser expects width {self.d}, got x_t {x_t.shape[-1]} "
                             f"and s {s.shape[-1]}")
        if isinstance(t, int):
            t = torch.full((x_t.shape[0],), t, dtype=torch.long, device=x_t.device)
        temb = timestep_embedding(t, self.time_embed_width).to(dtype=x_t.dtype,
                                                               device=x_t.device)
        h = self.act(self.fc1(torch.cat([x_t, s, temb], dim=-1)))
        h = self.act(self.fc2(h))
        eps_hat = self.out(h)
        return eps_hat[0] if single else eps_hat


def predict_noise(x_t: torch.Tensor, s: torch.Tensor, t, denoiser: DiffusionDenoiser) -> torch.Tensor:
    return denoiser(x_t, s, t)


def diffusion_loss(x_0: torch.Tensor, s: torch.Tensor, denoiser,
                   schedule: NoiseSchedule, generator: torch.Generator | None = None,
                   t: torch.Tensor | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared noise-prediction error (averaged over batch and width)
    with t drawn uniformly from [1, T] and fresh standard normal noise.

    `t` and `eps` may be passed in to freeze the draw (determinism, gradient
    checks); `denoiser` is any callable of (x_t, s, t).
    """
    if x_0.ndim != 2 or x_0.shape[0] == 0:
        raise ValueError(f"x_0 must be a non-empty (B, d) batch, got {tuple(x_0.shape)}")
    bsz = x_0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.steps + 1, (bsz,), generator=generator)
    if eps is None:
        eps = torch.randn(x_0.shape, dtype=x_0.dtype, generator=generator)
    x_t = q_sample(x_0, t, eps, schedule)
    eps_hat = denoiser(x_t, s, t.to(x_0.device))
    return ((eps - eps_hat) ** 2).mean()


def sample_augmentation(x_t_init: torch.Tensor, s: torch.Tensor,
                        denoiser: DiffusionDenoiser, schedule: NoiseSchedule,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    """Ancestral reverse chain from t = T down to 1, conditioned on the intent
    signal s; returns the reconstructed representation.

    Each step applies x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat)
    / sqrt(alpha_t) + sigma_t z with sigma_t^2 = beta_t and no noise at t = 1.
    """
    x = x_t_init
    for t in range(schedule.steps, 0, -1):
        eps_hat = denoiser(x, s, t)
        alpha_t = float(schedule.alphas[t - 1])
        beta_t = float(schedule.betas[t - 1])
        abar_t = schedule.alpha_bar(t)
        x = (x - (beta_t / math.sqrt(1.0 - abar_t)) * eps_hat) / math.sqrt(alpha_t)
        if t > 1:
            z = torch.randn(x.shape, dtype=x.dtype, generator=generator).to(x.device)
            x = x + math.sqrt(beta_t) * z
        if not torch.isfinite(x).all():
            raise RuntimeError(f"diffusion sampling diverged at step {t}")
    return x
