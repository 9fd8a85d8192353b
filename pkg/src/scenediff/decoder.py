"""Multimodal trajectory decoder and kinematic rollout."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .errors import RangeError, ShapeError
from .nn.layers import MLP, GRUCell, LayerNorm, Linear, sinusoidal_embedding
from .scene import wrap_angle


class ModalOutput(NamedTuple):
    displacements: torch.Tensor  # [..., M, T_f, 3]  (dx, dy, dtheta)
    logits: torch.Tensor  # [..., M]


class TrajectoryDecoder(nn.Module):
    """GRU unrolled over the future from the pooled scene feature.

    The first GRU input is a learned start token; afterwards the input is an
    embedding of the previous step's displacement outputs. Two MLP blocks map
    each hidden state to ``M x 3`` displacements; a separate MLP maps the
    pooled feature to ``M`` modality logits.

    ``use_gru=False`` replaces the recurrence by a per-step time embedding and
    ``use_mlp=False`` replaces the MLP blocks by a single linear head.
    """

    def __init__(self, dim, n_modes, horizon, gen, use_gru=True, use_mlp=True, zero_out=False):
        super().__init__()
        if n_modes < 1 or horizon < 1:
            raise ShapeError("need M >= 1 and T_f >= 1")
        self.dim = dim
        self.n_modes = n_modes
        self.horizon = horizon
        self.use_gru = use_gru
        self.use_mlp = use_mlp
        out = 3 * n_modes
        if use_gru:
            self.start = nn.Parameter(((torch.rand(dim, generator=gen, dtype=torch.float64) * 2 - 1) * 0.1).float())
            self.feedback = Linear(out, dim, gen)
            self.gru = GRUCell(dim, dim, gen)
        else:
            self.step_proj = Linear(dim, dim, gen)
        if use_mlp:
            self.norm = LayerNorm(dim)
            self.block1 = MLP(dim, 2 * dim, dim, gen)
            self.block2 = MLP(dim, 2 * dim, out, gen, zero_out=zero_out)
        else:
            self.head = Linear(dim, out, gen, zero=zero_out)
        self.cls = MLP(dim, dim, n_modes, gen)

    def _head(self, h):
        if self.use_mlp:
            h = h + self.block1(self.norm(h))
            return self.block2(h)
        return self.head(h)

    def forward(self, pooled, n_modes=None, horizon=None):
        M = self.n_modes if n_modes is None else n_modes
        T_f = self.horizon if horizon is None else horizon
        if M != self.n_modes:
            raise ShapeError(f"decoder was built for M={self.n_modes}, asked for {M}")
        if pooled.shape[-1] != self.dim:
            raise ShapeError(f"pooled feature width {pooled.shape[-1]} != {self.dim}")
        outs = []
        if self.use_gru:
            h = pooled
            inp = self.start.expand_as(pooled)
            for _ in range(T_f):
                h = self.gru(h, inp)
                o = self._head(h)
                outs.append(o)
                inp = self.feedback(o)
        else:
            temb = sinusoidal_embedding(torch.arange(T_f), self.dim).to(pooled.dtype)
            for t in range(T_f):
                outs.append(self._head(torch.tanh(pooled + self.step_proj(temb[t]))))
        d = torch.stack(outs, dim=-2)  # [..., T_f, 3M]
        d = d.reshape(*d.shape[:-1], M, 3).movedim(-2, -3)  # [..., M, T_f, 3]
        return ModalOutput(d, self.cls(pooled))


def decode_multimodal(decoder: TrajectoryDecoder, features, M=None, T_f=None) -> ModalOutput:
    pooled = features.pooled if hasattr(features, "pooled") else features
    return decoder(pooled, M, T_f)


def rollout(displacements, pos0, dt):
    """Integrate displacements from the current pose.

    ``displacements [..., M, T_f, 3]``, ``pos0 [..., 3]`` holding ``(x, y, theta)``.
    Returns ``[..., M, T_f, 4]`` of ``(x, y, theta, v)`` with
    ``v = |(dx, dy)| / dt`` and theta wrapped to (-pi, pi].
    """
    if dt <= 0:
        raise RangeError("dt must be positive")
    if displacements.shape[-1] != 3:
        raise ShapeError("displacements must have 3 channels (dx, dy, dtheta)")
    start = pos0[..., None, None, :3]
    path = start + torch.cumsum(displacements, dim=-2)
    theta = wrap_angle(path[..., 2:3])
    speed = torch.sqrt((displacements[..., :2] ** 2).sum(-1, keepdim=True)) / dt
    return torch.cat([path[..., :2], theta, speed], dim=-1)


def modality_probabilities(logits):
    return torch.softmax(logits, dim=-1)


def modal_ade(traj, gt, mask=None):
    """ADE of every modality: ``traj [..., M, T, 2+]``, ``gt [..., T, 2+]`` -> ``[..., M]``."""
    dist = torch.linalg.vector_norm(traj[..., :2] - gt[..., None, :, :2], dim=-1)
    if mask is None:
        return dist.mean(-1)
    m = mask[..., None, :].to(dist.dtype)
    return (dist * m).sum(-1) / m.sum(-1).clamp_min(1.0)


def select_best_modality(traj, gt, mask=None):
    """Index of the lowest-ADE modality; ties go to the lowest index."""
    with torch.no_grad():
        return torch.argmin(modal_ade(traj, gt, mask), dim=-1)
