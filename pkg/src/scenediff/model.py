"""Batch collation and the full generation pipeline.

The pipeline runs action diffusion over history latents, the scene encoder,
the multimodal decoder and the kinematic rollout.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import diffusion
from .decoder import ModalOutput, TrajectoryDecoder, modality_probabilities, rollout
from .encoder import EncoderConfig, SceneEncoder
from .errors import ShapeError, ValidationError
from .nn.layers import Linear
from .scene import MOVE_DIM, future_targets, to_feature_tensors

# (dx, dy, dtheta, dv) -> roughly unit scale at 10 Hz
MOVE_SCALE = (1.0, 1.0, 10.0, 10.0)
DENOISER_CHOICES = ("dit", "unet-like-mlp", "random-noise")


def _pad(arrays, shape_tail, dtype=np.float64):
    n = max((len(a) for a in arrays), default=0)
    out = np.zeros((len(arrays), n) + tuple(shape_tail), dtype=dtype)
    for i, a in enumerate(arrays):
        if len(a):
            out[i, : len(a)] = a
    return out


def collate(scenarios, n_points=20, dtype=torch.float32, with_future=None):
    """Pad a list of scenarios into one batch dict of tensors.

    Keys ending in ``_mask`` are boolean. ``pose0`` and ``gt`` stay in the
    original world frame; embedding inputs are scene-centred.
    """
    if not scenarios:
        raise ValidationError("cannot collate an empty batch")
    dts = {s.dt for s in scenarios}
    horizons = {s.T_f for s in scenarios}
    hists = {s.T_h for s in scenarios}
    if len(dts) > 1 or len(horizons) > 1 or len(hists) > 1:
        raise ShapeError("all scenarios in a batch must share dt, T_h and T_f")
    if with_future is None:
        with_future = all(s.has_future() for s in scenarios)
    T_h = scenarios[0].T_h
    S = T_h - 1

    feats = [to_feature_tensors(s.history(), n_points) for s in scenarios]
    ap = [f.num_predicted for f in feats]
    cols = {k: [] for k in ("pp", "wp", "pa", "wa", "pm", "wm", "psm", "wsm", "pam", "wam", "pose")}
    for s, f in zip(scenarios, feats):
        n = f.num_predicted
        cols["pp"].append(f.agent_pos[:n])
        cols["wp"].append(f.agent_pos[n:])
        cols["pa"].append(f.agent_attrs[:n])
        cols["wa"].append(f.agent_attrs[n:])
        cols["pm"].append(f.agent_hist[:n])
        cols["wm"].append(f.agent_hist[n:])
        cols["psm"].append(f.step_mask[:n])
        cols["wsm"].append(f.step_mask[n:])
        cols["pam"].append(f.agent_mask[:n])
        cols["wam"].append(f.agent_mask[n:])
        cols["pose"].append(np.stack([a.states[T_h - 1] for a in s.predicted_agents]))
    attr_dim = feats[0].agent_attrs.shape[1]

    def t(a, dt=dtype):
        return torch.as_tensor(a, dtype=dt)

    batch = {
        "pred_pos": t(_pad(cols["pp"], (S, 2))),
        "world_pos": t(_pad(cols["wp"], (S, 2))),
        "pred_attrs": t(_pad(cols["pa"], (attr_dim,))),
        "world_attrs": t(_pad(cols["wa"], (attr_dim,))),
        "pred_moves": t(_pad(cols["pm"], (S, MOVE_DIM))),
        "world_moves": t(_pad(cols["wm"], (S, MOVE_DIM))),
        "pred_step_mask": t(_pad(cols["psm"], (S,), bool), torch.bool),
        "world_step_mask": t(_pad(cols["wsm"], (S,), bool), torch.bool),
        "pred_mask": t(_pad(cols["pam"], (), bool), torch.bool),
        "world_mask": t(_pad(cols["wam"], (), bool), torch.bool),
        "light_feats": t(_pad([f.light_feats for f in feats], (T_h, feats[0].light_feats.shape[-1]))),
        "light_mask": t(_pad([f.light_mask for f in feats], (), bool), torch.bool),
        "map_feats": t(_pad([f.map_feats[0] for f in feats], (n_points, feats[0].map_feats.shape[-1]))),
        "map_point_mask": t(_pad([f.map_point_mask for f in feats], (n_points,), bool), torch.bool),
        "map_mask": t(_pad([f.map_mask for f in feats], (), bool), torch.bool),
        "pose0": t(_pad(cols["pose"], (4,))),
        "dt": float(scenarios[0].dt),
        "T_f": int(scenarios[0].T_f),
        "ids": [s.id for s in scenarios],
        "agent_ids": [[a.id for a in s.predicted_agents] for s in scenarios],
        "num_predicted": ap,
    }
    if with_future:
        gts, gms = zip(*(future_targets(s) for s in scenarios))
        batch["gt"] = t(_pad(list(gts), (scenarios[0].T_f, 3)))
        batch["gt_mask"] = t(_pad(list(gms), (scenarios[0].T_f,), bool), torch.bool) & batch["pred_mask"][..., None]
    return batch


def stratified_steps(B, T, generator):
    """Low-discrepancy draw of ``B`` steps in ``1..T``.

    One uniform offset is shared by ``B`` evenly spaced strata and the strata
    are shuffled across items, so each item's step is still uniform on ``1..T``
    while the batch covers the range evenly.
    """
    u0 = torch.rand((), generator=generator, dtype=torch.float64)
    u = (u0 + torch.arange(B, dtype=torch.float64) / B) % 1.0
    u = u[torch.randperm(B, generator=generator)]
    return (u * T).long().clamp_max(T - 1) + 1


def batch_to(batch, dtype):
    return {k: (v.to(dtype) if isinstance(v, torch.Tensor) and v.is_floating_point() else v) for k, v in batch.items()}


class SceneModel(nn.Module):
    """Diffusion -> encoder -> decoder -> rollout.

    ``cfg`` needs the model fields of :class:`scenediff.training.TrainConfig`.
    """

    def __init__(self, cfg):
        super().__init__()
        if cfg.denoiser not in DENOISER_CHOICES:
            raise ValidationError(f"denoiser must be one of {DENOISER_CHOICES}")
        gen = torch.Generator().manual_seed(int(cfg.seed))
        D = cfg.model_dim
        latent_dim = cfg.latent_dim or D
        self.cfg = cfg
        self.latent_dim = latent_dim
        self.schedule = diffusion.make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
        self.hist_embed = Linear(MOVE_DIM, D, gen)
        self.latent_embed = Linear(MOVE_DIM, latent_dim, gen)
        if cfg.denoiser == "random-noise":
            self.denoiser = None
        else:
            cls = diffusion.DENOISERS[cfg.denoiser]
            self.denoiser = cls(latent_dim, D, D, cfg.heads, cfg.n_dit_blocks, gen)
        enc_cfg = EncoderConfig(
            model_dim=D,
            heads=cfg.heads,
            n_self_blocks=cfg.n_self_blocks,
            n_other_agent_blocks=cfg.n_other_agent_blocks,
            n_map_blocks=cfg.n_map_blocks,
            n_light_blocks=cfg.n_light_blocks,
            n_fusion_blocks=cfg.n_fusion_blocks,
            latent_dim=latent_dim,
            pos_scale=cfg.pos_scale,
        )
        self.encoder = SceneEncoder(enc_cfg, gen)
        self.decoder = TrajectoryDecoder(D, cfg.n_modes, cfg.T_f, gen, use_gru=cfg.use_gru, use_mlp=cfg.use_mlp)
        self.register_buffer("move_scale", torch.tensor(MOVE_SCALE, dtype=torch.float32))

    @property
    def dtype(self):
        return self.hist_embed.weight.dtype

    def history_encodings(self, batch):
        moves = batch["pred_moves"] * self.move_scale
        return self.hist_embed(moves), self.latent_embed(moves)

    def diffuse(self, batch, generator, t=None, eps=None):
        """Training-time latents: noise the history latent, denoise, and reconstruct it.

        Returns ``(latent, l_diff)``.
        """
        cond, x0 = self.history_encodings(batch)
        mask = batch["pred_step_mask"]
        B = x0.shape[0]
        if eps is None:
            eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64).to(x0.dtype)
        if self.denoiser is None:
            return eps, x0.new_zeros(())
        if t is None:
            t = stratified_steps(B, self.schedule.T, generator)
        x_t = diffusion.forward_noise(self.schedule, x0, t, eps)
        eps_hat = self.denoiser(x_t, t, cond, mask)
        l_diff = diffusion.masked_mean((eps - eps_hat) ** 2, mask)
        return diffusion.predict_x0(self.schedule, x_t, t, eps_hat), l_diff

    def sample_latents(self, batch, generator):
        cond, x0 = self.history_encodings(batch)
        if self.denoiser is None:
            return torch.randn(x0.shape, generator=generator, dtype=torch.float64).to(x0.dtype)
        return diffusion.sample_latents(
            self.schedule, self.denoiser, cond, generator, shape=tuple(x0.shape), agent_step_mask=batch["pred_step_mask"]
        )

    def world_displacements(self, residual, pose0, dt):
        """Add the constant-velocity step ``v0 dt (cos theta0, sin theta0)`` to world-frame residuals."""
        theta, v = pose0[..., 2], pose0[..., 3]
        step = torch.stack([v * dt * torch.cos(theta), v * dt * torch.sin(theta), torch.zeros_like(v)], dim=-1)
        return residual + step[..., None, None, :]

    def decode(self, batch, latent):
        features = self.encoder(batch, latent)
        out: ModalOutput = self.decoder(features.pooled)
        if getattr(self.cfg, "kinematic_prior", False):
            out = ModalOutput(self.world_displacements(out.displacements, batch["pose0"], batch["dt"]), out.logits)
        traj = rollout(out.displacements, batch["pose0"][..., :3], batch["dt"])
        return out, traj

    def forward(self, batch, generator, t=None, eps=None):
        latent, l_diff = self.diffuse(batch, generator, t, eps)
        out, traj = self.decode(batch, latent)
        return {"l_diff": l_diff, "logits": out.logits, "displacements": out.displacements, "traj": traj}

    @torch.no_grad()
    def generate(self, batch, generator):
        """Inference: sampled latents -> trajectories ``[B, Ap, M, T_f, 4]`` and probabilities."""
        latent = self.sample_latents(batch, generator)
        out, traj = self.decode(batch, latent)
        return traj, modality_probabilities(out.logits)


def n_parameters(module) -> int:
    return sum(p.numel() for p in module.parameters())
