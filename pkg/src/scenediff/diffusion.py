"""DDPM over agent action latents with a transformer denoiser.

Timesteps are 1-based: ``t = 1 .. T``. Latent tensors are laid out
``[B, A, S, D_latent]`` (batch, agent, history step, channel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import NonFiniteError, RangeError, ShapeError
from .nn.layers import MLP, LayerNorm, Linear, MultiHeadAttention, sinusoidal_embedding


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def _gather(self, arr, t, like):
        t_arr = torch.as_tensor(t)
        if t_arr.numel() and (int(t_arr.min()) < 1 or int(t_arr.max()) > self.T):
            raise RangeError(f"diffusion step outside [1, {self.T}]")
        vals = torch.as_tensor(arr, dtype=like.dtype)[t_arr.long() - 1]
        if vals.ndim:
            vals = vals.reshape(vals.shape + (1,) * (like.ndim - vals.ndim))
        return vals

    def alpha_bar(self, t, like):
        return self._gather(self.alpha_bars, t, like)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative products ``alpha_bar``."""
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise RangeError("need T >= 1 and 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def noise_with(alpha_bar, x0, eps):
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps


def forward_noise(schedule: NoiseSchedule, x0, t, eps):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is an int or per-batch ``[B]``."""
    if eps.shape != x0.shape:
        raise ShapeError("eps must have the shape of x0")
    return noise_with(schedule.alpha_bar(t, x0), x0, eps)


def predict_x0(schedule: NoiseSchedule, x_t, t, eps_hat):
    ab = schedule.alpha_bar(t, x_t)
    return (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def _modulate(x, shift, scale):
    return x * (1.0 + scale) + shift


class DiTBlock(nn.Module):
    """Pre-norm block: agent self-attention, history cross-attention, MLP.

    Each norm output is scaled and shifted by a projection of the diffusion
    step embedding (zero-initialized, so the block starts unmodulated).
    """

    def __init__(self, dim, heads, gen):
        super().__init__()
        self.norm1 = LayerNorm(dim, affine=False)
        self.norm2 = LayerNorm(dim, affine=False)
        self.norm3 = LayerNorm(dim, affine=False)
        self.agent_attn = MultiHeadAttention(dim, heads, gen)
        self.cond_attn = MultiHeadAttention(dim, heads, gen)
        self.mlp = MLP(dim, 4 * dim, dim, gen)
        self.ada = Linear(dim, 6 * dim, gen, zero=True)

    def forward(self, x, c, cond, agent_step_mask):
        # x, cond: [B, A, S, D]; c: [B, D]; agent_step_mask: [B, A, S]
        mod = self.ada(F.silu(c))[:, None, None, :].chunk(6, dim=-1)
        h = _modulate(self.norm1(x), mod[0], mod[1]).transpose(1, 2)  # [B, S, A, D]
        x = x + self.agent_attn(h, h, key_mask=agent_step_mask.transpose(1, 2)).transpose(1, 2)
        h = _modulate(self.norm2(x), mod[2], mod[3])
        x = x + self.cond_attn(h, cond, key_mask=agent_step_mask)
        x = x + self.mlp(_modulate(self.norm3(x), mod[4], mod[5]))
        return x


class _StepEmbedder(nn.Module):
    def __init__(self, dim, gen):
        super().__init__()
        self.dim = dim
        self.fc1 = Linear(dim, dim, gen)
        self.fc2 = Linear(dim, dim, gen)

    def forward(self, t):
        e = sinusoidal_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(e)))


class DiTDenoiser(nn.Module):
    """Noise predictor conditioned on the diffusion step and embedded history.

    ``forward(x_t, t, cond, agent_step_mask)`` maps ``x_t [B, A, S, D_latent]``
    to a noise estimate of the same shape. The final projection is
    zero-initialized, so a fresh model predicts zero noise.
    """

    kind = "dit"

    def __init__(self, latent_dim, model_dim, cond_dim, heads, n_blocks, gen):
        super().__init__()
        if n_blocks < 1:
            raise ShapeError("DiT needs at least one block")
        self.model_dim = model_dim
        self.in_proj = Linear(latent_dim, model_dim, gen)
        self.cond_proj = Linear(cond_dim, model_dim, gen)
        self.step_embed = _StepEmbedder(model_dim, gen)
        self.blocks = nn.ModuleList(DiTBlock(model_dim, heads, gen) for _ in range(n_blocks))
        self.final_norm = LayerNorm(model_dim, affine=False)
        self.final_ada = Linear(model_dim, 2 * model_dim, gen, zero=True)
        self.out = Linear(model_dim, latent_dim, gen, zero=True)

    def forward(self, x_t, t, cond, agent_step_mask=None):
        if x_t.shape[:3] != cond.shape[:3]:
            raise ShapeError(f"x_t {tuple(x_t.shape)} and cond {tuple(cond.shape)} disagree on [B, A, S]")
        B, A, S, _ = x_t.shape
        if agent_step_mask is None:
            agent_step_mask = torch.ones(B, A, S, dtype=torch.bool)
        t = torch.as_tensor(t).reshape(-1).expand(B)
        pos = sinusoidal_embedding(torch.arange(S), self.model_dim).to(x_t.dtype)
        cond = self.cond_proj(cond) + pos
        # history is step-aligned with the latent, so it is also added token-wise
        x = self.in_proj(x_t) + cond
        c = self.step_embed(t)
        for block in self.blocks:
            x = block(x, c, cond, agent_step_mask)
        shift, scale = self.final_ada(F.silu(c))[:, None, None, :].chunk(2, dim=-1)
        return self.out(_modulate(self.final_norm(x), shift, scale))


class MLPDenoiser(nn.Module):
    """Convolution-free residual MLP denoiser, the stand-in for a U-Net.

    Works per token, with no attention across agents or steps; history enters
    additively. Width is chosen to roughly match a DiT of ``n_blocks`` blocks.
    """

    kind = "unet-like-mlp"

    def __init__(self, latent_dim, model_dim, cond_dim, heads, n_blocks, gen):
        super().__init__()
        self.model_dim = model_dim
        self.in_proj = Linear(latent_dim, model_dim, gen)
        self.cond_proj = Linear(cond_dim, model_dim, gen)
        self.step_embed = _StepEmbedder(model_dim, gen)
        self.norms = nn.ModuleList(LayerNorm(model_dim) for _ in range(3 * n_blocks))
        self.mlps = nn.ModuleList(MLP(model_dim, 4 * model_dim, model_dim, gen) for _ in range(3 * n_blocks))
        self.final_norm = LayerNorm(model_dim)
        self.out = Linear(model_dim, latent_dim, gen, zero=True)

    def forward(self, x_t, t, cond, agent_step_mask=None):
        B, A, S, _ = x_t.shape
        t = torch.as_tensor(t).reshape(-1).expand(B)
        pos = sinusoidal_embedding(torch.arange(S), self.model_dim).to(x_t.dtype)
        x = self.in_proj(x_t) + self.cond_proj(cond) + pos + self.step_embed(t)[:, None, None, :]
        for norm, mlp in zip(self.norms, self.mlps):
            x = x + mlp(norm(x))
        return self.out(self.final_norm(x))


def masked_mean(values, mask):
    """Mean of ``values [..., C]`` over entries whose ``mask [...]`` is true."""
    if mask is None:
        return values.mean()
    m = mask[..., None].to(values.dtype).expand_as(values)
    return (values * m).sum() / m.sum().clamp_min(1.0)


def diffusion_loss(schedule, denoiser, x0, t, eps, cond, agent_step_mask=None):
    """Mean squared error between injected and predicted noise over valid elements."""
    x_t = forward_noise(schedule, x0, t, eps)
    eps_hat = denoiser(x_t, t, cond, agent_step_mask)
    return masked_mean((eps - eps_hat) ** 2, agent_step_mask)


@torch.no_grad()
def sample_latents(schedule, denoiser, cond, generator, shape=None, agent_step_mask=None, dtype=None):
    """Ancestral DDPM sampling from ``x_T ~ N(0, I)`` with ``sigma_t = sqrt(beta_t)``."""
    dtype = cond.dtype if dtype is None else dtype
    if shape is None:
        raise ShapeError("latent shape required")
    B = shape[0]
    x = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
    for t in range(schedule.T, 0, -1):
        eps_hat = denoiser(x, torch.full((B,), t), cond, agent_step_mask)
        alpha = schedule.alphas[t - 1]
        beta = schedule.betas[t - 1]
        ab = schedule.alpha_bars[t - 1]
        x = (x - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            z = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
            x = x + math.sqrt(beta) * z
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"sampler diverged at step {t}")
    return x


DENOISERS = {"dit": DiTDenoiser, "unet-like-mlp": MLPDenoiser}
