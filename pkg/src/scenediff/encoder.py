"""Scene encoder: embeddings, attention formers, temporal-spatial fusion.

Shapes use ``B`` batch, ``Ap``/``Aw`` predicted/world agents, ``S`` history
steps (``T_h - 1``), ``L`` polylines, ``P`` points, ``N`` traffic lights and
``D`` the model width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeError
from .nn.layers import MLP, LayerNorm, Linear, MultiHeadAttention, sinusoidal_embedding
from .scene import ATTR_DIM, LIGHT_DIM, LIGHT_STATES, MAP_DIM


@dataclass
class EncoderConfig:
    model_dim: int = 64
    heads: int = 8
    n_self_blocks: int = 1
    n_other_agent_blocks: int = 4
    n_map_blocks: int = 4
    n_light_blocks: int = 2
    n_fusion_blocks: int = 1
    latent_dim: int = 64
    pos_scale: float = 0.05

    def validate(self):
        if self.model_dim % 2 or self.model_dim % self.heads:
            raise ShapeError("model_dim must be even and divisible by heads")
        for name in ("n_self_blocks", "n_other_agent_blocks", "n_map_blocks", "n_light_blocks", "n_fusion_blocks"):
            if getattr(self, name) < 0:
                raise ShapeError(f"{name} must be >= 0")
        return self


class SceneFeatures(NamedTuple):
    fused: torch.Tensor  # [B, Ap, S, D]
    pooled: torch.Tensor  # [B, Ap, D]


class AgentEmbedding(nn.Module):
    """ReLU(LayerNorm([phi_p(x, y), phi_f(attrs)])) with attributes broadcast over time."""

    def __init__(self, dim, gen, pos_scale=0.05):
        super().__init__()
        self.pos_scale = pos_scale
        self.phi_p = Linear(2, dim // 2, gen)
        self.phi_f = Linear(ATTR_DIM, dim - dim // 2, gen)
        self.norm = LayerNorm(dim)

    def forward(self, positions, attrs):
        if positions.shape[-1] != 2 or attrs.shape[-1] != ATTR_DIM:
            raise ShapeError("embed_agent expects positions [..., S, 2] and attrs [..., ATTR_DIM]")
        e_p = self.phi_p(positions * self.pos_scale)
        e_f = self.phi_f(attrs)[..., None, :].expand(*e_p.shape[:-1], -1)
        return F.relu(self.norm(torch.cat([e_p, e_f], dim=-1)))


class LightEmbedding(nn.Module):
    def __init__(self, dim, gen, pos_scale=0.05):
        super().__init__()
        self.pos_scale = pos_scale
        self.phi_p = Linear(2, dim // 2, gen)
        self.phi_s = Linear(len(LIGHT_STATES), dim - dim // 2, gen)
        self.norm = LayerNorm(dim)

    def forward(self, light_feats):
        if light_feats.shape[-1] != LIGHT_DIM:
            raise ShapeError(f"light features must have width {LIGHT_DIM}")
        e = torch.cat([self.phi_p(light_feats[..., :2] * self.pos_scale), self.phi_s(light_feats[..., 2:])], dim=-1)
        return F.relu(self.norm(e))


class MapEmbedding(nn.Module):
    """Per-point linear embedding max-pooled over each polyline's valid points."""

    def __init__(self, dim, gen, pos_scale=0.05):
        super().__init__()
        self.pos_scale = pos_scale
        self.point = Linear(MAP_DIM, dim, gen)
        self.norm = LayerNorm(dim)

    def forward(self, map_feats, point_mask):
        if map_feats.shape[-1] != MAP_DIM:
            raise ShapeError(f"map features must have width {MAP_DIM}")
        scaled = torch.cat([map_feats[..., :2] * self.pos_scale, map_feats[..., 2:]], dim=-1)
        e = self.point(scaled)  # [B, L, P, D]
        e = e.masked_fill(~point_mask[..., None], float("-inf"))
        pooled = e.max(dim=-2).values
        any_pt = point_mask.any(dim=-1, keepdim=True)
        pooled = torch.where(any_pt, pooled, torch.zeros_like(pooled))
        return self.norm(pooled)


class AttentionBlock(nn.Module):
    """Pre-norm residual attention + MLP block; self-attention when no memory is given.

    Attention and MLP output projections are zero-initialized, so a fresh
    block is the identity.
    """

    def __init__(self, dim, heads, gen):
        super().__init__()
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, gen, zero_out=True)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim, dim, gen, zero_out=True)

    def forward(self, x, memory=None, key_mask=None):
        h = self.norm_q(x)
        kv = h if memory is None else self.norm_kv(memory)
        x = x + self.attn(h, kv, key_mask=key_mask)
        return x + self.mlp(self.norm_mlp(x))


def _blocks(n, dim, heads, gen):
    return nn.ModuleList(AttentionBlock(dim, heads, gen) for _ in range(n))


class SceneEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, gen):
        super().__init__()
        c = config.validate()
        self.config = c
        D = c.model_dim
        self.agent_embed = AgentEmbedding(D, gen, c.pos_scale)
        self.light_embed = LightEmbedding(D, gen, c.pos_scale)
        self.map_embed = MapEmbedding(D, gen, c.pos_scale)
        self.self_blocks = _blocks(c.n_self_blocks, D, c.heads, gen)
        self.other_agent_blocks = _blocks(c.n_other_agent_blocks, D, c.heads, gen)
        self.map_blocks = _blocks(c.n_map_blocks, D, c.heads, gen)
        self.light_blocks = _blocks(c.n_light_blocks, D, c.heads, gen)
        self.latent_proj = Linear(c.latent_dim, D, gen, bias=False)
        self.temporal_blocks = _blocks(c.n_fusion_blocks, D, c.heads, gen)
        self.spatial_blocks = _blocks(c.n_fusion_blocks, D, c.heads, gen)

    # -- embeddings -------------------------------------------------------
    def embed_agent(self, positions, attrs):
        return self.agent_embed(positions, attrs)

    def embed_lights(self, light_feats):
        return self.light_embed(light_feats)

    def embed_map(self, map_feats, point_mask):
        return self.map_embed(map_feats, point_mask)

    # -- formers ----------------------------------------------------------
    def run_formers(self, e_pred, e_world, e_map, e_lights, masks):
        """Predicted-agent self-attention, then world-agent, map and light formers.

        ``masks`` holds ``pred_step [B, Ap, S]``, ``world_step [B, Aw, S]``,
        ``map [B, L]`` and ``light [B, N]``. ``e_lights`` is ``[B, N, S+1, D]``;
        step ``s`` of an agent attends to the light states of the same step.
        """
        x = e_pred.transpose(1, 2)  # [B, S, Ap, D]
        pred_mask = masks["pred_step"].transpose(1, 2)
        for blk in self.self_blocks:
            x = blk(x, key_mask=pred_mask)
        if e_world.shape[1] > 0:
            mem = e_world.transpose(1, 2)  # [B, S, Aw, D]
            wmask = masks["world_step"].transpose(1, 2)
            for blk in self.other_agent_blocks:
                x = blk(x, mem, wmask)
        B, S, Ap, D = x.shape
        if e_map.shape[1] > 0 and len(self.map_blocks):
            y = x.reshape(B, S * Ap, D)
            for blk in self.map_blocks:
                y = blk(y, e_map, masks["map"])
            x = y.reshape(B, S, Ap, D)
        if e_lights.shape[1] > 0 and len(self.light_blocks):
            mem = e_lights[:, :, 1:].transpose(1, 2)  # [B, S, N, D]
            lmask = masks["light"][:, None, :].expand(B, S, -1)
            for blk in self.light_blocks:
                x = blk(x, mem, lmask)
        return x.transpose(1, 2)

    def fuse_temporal_spatial(self, former_out, action_latent, pred_step_mask):
        if former_out.shape[:3] != action_latent.shape[:3]:
            raise ShapeError("former output and action latents disagree on [B, Ap, S]")
        h = former_out + self.latent_proj(action_latent)
        S = h.shape[2]
        if len(self.temporal_blocks):
            h = h + sinusoidal_embedding(torch.arange(S), h.shape[-1]).to(h.dtype)
        for t_blk, s_blk in zip(self.temporal_blocks, self.spatial_blocks):
            h = t_blk(h, key_mask=pred_step_mask)
            h = s_blk(h.transpose(1, 2), key_mask=pred_step_mask.transpose(1, 2)).transpose(1, 2)
        return SceneFeatures(h, h[:, :, -1])

    def forward(self, batch, action_latent):
        n_pred = batch["pred_pos"].shape[1]
        pos = torch.cat([batch["pred_pos"], batch["world_pos"]], dim=1)
        attrs = torch.cat([batch["pred_attrs"], batch["world_attrs"]], dim=1)
        e_all = self.embed_agent(pos, attrs)
        e_pred, e_world = e_all[:, :n_pred], e_all[:, n_pred:]
        e_map = self.embed_map(batch["map_feats"], batch["map_point_mask"])
        e_lights = self.embed_lights(batch["light_feats"])
        masks = {
            "pred_step": batch["pred_step_mask"],
            "world_step": batch["world_step_mask"],
            "map": batch["map_mask"],
            "light": batch["light_mask"],
        }
        former_out = self.run_formers(e_pred, e_world, e_map, e_lights, masks)
        return self.fuse_temporal_spatial(former_out, action_latent, batch["pred_step_mask"])
