"""Parameterized layers on top of torch autograd.

Layers take a ``torch.Generator`` at construction so a model built twice
from the same seed is bit-identical. Weights are stored ``[in, out]`` and
applied as ``y = x @ W + b``.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional

import torch
from torch import nn
import torch.nn.functional as F

from ..errors import ShapeError

LN_EPS = 1e-5


def _uniform(shape, bound, gen):
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = x @ weight
    return y if bias is None else y + bias


class Linear(nn.Module):
    def __init__(self, in_dim, out_dim, gen, bias=True, zero=False):
        super().__init__()
        bound = 1.0 / math.sqrt(in_dim)
        w = torch.zeros(in_dim, out_dim, dtype=torch.float64) if zero else _uniform((in_dim, out_dim), bound, gen)
        self.weight = nn.Parameter(w.float())
        if bias:
            b = torch.zeros(out_dim, dtype=torch.float64) if zero else _uniform((out_dim,), bound, gen)
            self.bias = nn.Parameter(b.float())
        else:
            self.register_parameter("bias", None)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


def layer_norm(x, weight=None, bias=None, eps=LN_EPS):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


class LayerNorm(nn.Module):
    def __init__(self, dim, affine=True):
        super().__init__()
        if affine:
            self.weight = nn.Parameter(torch.ones(dim))
            self.bias = nn.Parameter(torch.zeros(dim))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


class MLP(nn.Module):
    """Two-layer perceptron with GELU. ``zero_out`` zero-initializes the last layer."""

    def __init__(self, in_dim, hidden, out_dim, gen, zero_out=False):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden, gen)
        self.fc2 = Linear(hidden, out_dim, gen, zero=zero_out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class AttentionResult(NamedTuple):
    output: torch.Tensor
    weights: torch.Tensor
    all_masked: torch.Tensor


def attention(q, k, v, mask=None) -> AttentionResult:
    """Scaled dot-product attention.

    ``q [..., Lq, d]``, ``k [..., Lk, d]``, ``v [..., Lk, dv]``; ``mask`` marks
    valid keys and broadcasts against ``[..., Lq, Lk]``. Query rows with no
    valid key get zero weights and zero output and are flagged in
    ``all_masked``.
    """
    d_k = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    if mask is None:
        weights = torch.softmax(logits, dim=-1)
        all_masked = torch.zeros(logits.shape[:-1], dtype=torch.bool, device=logits.device)
        return AttentionResult(weights @ v, weights, all_masked)
    mask = mask.to(torch.bool).expand_as(logits)
    any_valid = mask.any(dim=-1, keepdim=True)
    logits = logits.masked_fill(~mask, float("-inf")).masked_fill(~any_valid, 0.0)
    weights = torch.softmax(logits, dim=-1) * any_valid
    return AttentionResult(weights @ v, weights, ~any_valid.squeeze(-1))


class MultiHeadAttention(nn.Module):
    """Multi-head attention with split heads and an output projection.

    ``key_mask [..., Lk]`` marks valid memory entries. Rows that see no valid
    key return exact zeros, so a masked-out memory contributes nothing to a
    residual stream.
    """

    def __init__(self, model_dim, heads, gen, kv_dim=None, zero_out=False):
        super().__init__()
        if heads < 1 or model_dim % heads:
            raise ShapeError(f"model_dim {model_dim} must be divisible by heads {heads}")
        kv_dim = model_dim if kv_dim is None else kv_dim
        self.heads = heads
        self.model_dim = model_dim
        self.d_k = model_dim // heads
        self.wq = Linear(model_dim, model_dim, gen)
        self.wk = Linear(kv_dim, model_dim, gen)
        self.wv = Linear(kv_dim, model_dim, gen)
        self.wo = Linear(model_dim, model_dim, gen, zero=zero_out)

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.heads, self.d_k).transpose(-2, -3)

    def forward(self, q_in, k_in, v_in=None, key_mask: Optional[torch.Tensor] = None, return_weights=False):
        v_in = k_in if v_in is None else v_in
        if k_in.shape[-2] != v_in.shape[-2]:
            raise ShapeError("keys and values must have the same length")
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(k_in))
        v = self._split(self.wv(v_in))
        mask = None if key_mask is None else key_mask[..., None, None, :]
        res = attention(q, k, v, mask)
        out = res.output.transpose(-2, -3)
        out = out.reshape(*out.shape[:-2], self.model_dim)
        out = self.wo(out)
        # all_masked: [..., h, Lq]; identical across heads
        dead = res.all_masked[..., 0, :]
        out = out.masked_fill(dead[..., None], 0.0)
        if return_weights:
            return out, res.weights, dead
        return out


def gru_step(h, x, wz, bz, wr, br, wh, bh):
    """One GRU update.

    z = sigmoid([x, h] Wz + bz), r = sigmoid([x, h] Wr + br),
    h~ = tanh([x, r*h] Wh + bh), h' = (1 - z) * h + z * h~.
    """
    if h.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gru_step: batch shapes differ {tuple(h.shape)} vs {tuple(x.shape)}")
    xh = torch.cat([x, h], dim=-1)
    z = torch.sigmoid(linear(xh, wz, bz))
    r = torch.sigmoid(linear(xh, wr, br))
    h_tilde = torch.tanh(linear(torch.cat([x, r * h], dim=-1), wh, bh))
    return (1.0 - z) * h + z * h_tilde


class GRUCell(nn.Module):
    def __init__(self, in_dim, hidden, gen):
        super().__init__()
        self.z = Linear(in_dim + hidden, hidden, gen)
        self.r = Linear(in_dim + hidden, hidden, gen)
        self.h = Linear(in_dim + hidden, hidden, gen)

    def forward(self, h, x):
        return gru_step(h, x, self.z.weight, self.z.bias, self.r.weight, self.r.bias, self.h.weight, self.h.bias)


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of (possibly fractional) positions ``t [...]`` -> ``[..., dim]``."""
    t = torch.as_tensor(t)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def masked_fill_rows(x, mask):
    """Zero rows of ``x [..., D]`` where ``mask [...]`` is false."""
    return x * mask[..., None].to(x.dtype)
