"""Losses, training configuration, and the optimization loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import config_hash, dataclass_from_dict, to_plain
from .decoder import modal_ade, modality_probabilities
from .errors import NonFiniteError, NonFiniteGradient, ShapeError, ValidationError
from .model import DENOISER_CHOICES, SceneModel, collate
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import Adam, check_finite, cosine_lr
from .scene import wrap_angle

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
METRICS_HEADER = ["epoch", "step", "l_diff", "l_reg", "l_cls", "l_total", "lr", "val_ade"]


@dataclass
class TrainConfig:
    # optimization
    epochs: int = 128
    batch_size: int = 16
    lr_init: float = 2e-4
    lr_min: float = 0.0
    schedule: str = "cosine"
    max_steps: int = 0
    grad_clip: float = 1.0
    huber_delta: float = 1.0
    selection: str = "ade"
    seed: int = 0
    dtype: str = "float32"
    eval_every: int = 1
    checkpoint_every: int = 1
    val_samples: int = 0
    # model
    model_dim: int = 64
    latent_dim: int = 0
    heads: int = 8
    n_modes: int = 10
    T_f: int = 16
    n_dit_blocks: int = 2
    n_self_blocks: int = 1
    n_other_agent_blocks: int = 4
    n_map_blocks: int = 4
    n_light_blocks: int = 2
    n_fusion_blocks: int = 1
    use_gru: bool = True
    use_mlp: bool = True
    kinematic_prior: bool = True
    denoiser: str = "dit"
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    pos_scale: float = 0.05
    n_points: int = 20

    def validate(self) -> "TrainConfig":
        for name in ("epochs", "batch_size", "model_dim", "heads", "n_modes", "T_f", "diffusion_steps", "n_points"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.lr_init <= 0:
            raise ValidationError("lr_init must be > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError("schedule must be 'cosine' or 'constant'")
        if self.selection not in ("ade", "huber"):
            raise ValidationError("selection must be 'ade' or 'huber'")
        if self.denoiser not in DENOISER_CHOICES:
            raise ValidationError(f"denoiser must be one of {DENOISER_CHOICES}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")
        if self.model_dim % self.heads or self.model_dim % 2:
            raise ValidationError("model_dim must be even and divisible by heads")
        return self

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return dataclass_from_dict(cls, values).validate()


# ---------------------------------------------------------------------------
# losses


def huber(residual, delta):
    a = residual.abs()
    return torch.where(a <= delta, 0.5 * residual**2, delta * (a - 0.5 * delta))


def trajectory_residual(pred, gt):
    """``(x, y, theta)`` residuals with the heading difference wrapped."""
    r = pred[..., :3] - gt[..., :3]
    return torch.cat([r[..., :2], wrap_angle(r[..., 2:3])], dim=-1)


def regression_loss(best_traj, gt, mask=None, delta=1.0):
    """Huber loss on the selected modality, mean over valid agent-steps and (x, y, theta)."""
    if best_traj.shape[:-1] != gt.shape[:-1]:
        raise ShapeError(f"trajectory {tuple(best_traj.shape)} vs ground truth {tuple(gt.shape)}")
    per = huber(trajectory_residual(best_traj, gt), delta)
    if mask is None:
        return per.mean()
    m = mask[..., None].to(per.dtype).expand_as(per)
    return (per * m).sum() / m.sum().clamp_min(1.0)


def classification_loss(probabilities, target_index, mask=None):
    """Cross-entropy against a one-hot target with ``log`` floored at 1e-12, mean over agents."""
    if probabilities.shape[:-1] != target_index.shape:
        raise ShapeError("target index must index the last axis of probabilities")
    p = probabilities.gather(-1, target_index[..., None].long()).squeeze(-1)
    nll = -torch.log(p.clamp_min(LOG_FLOOR))
    if mask is None:
        return nll.mean()
    m = mask.to(nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1.0)


def total_loss(l_diff, l_reg, l_cls):
    total = l_diff + l_reg + l_cls
    if not torch.isfinite(torch.as_tensor(total)).all():
        raise NonFiniteError("non-finite loss")
    return total


def modal_huber(traj, gt, mask, delta):
    per = huber(trajectory_residual(traj, gt[..., None, :, :]), delta).mean(-1)  # [..., M, T]
    m = mask[..., None, :].to(per.dtype)
    return (per * m).sum(-1) / m.sum(-1).clamp_min(1.0)


def compute_losses(model: SceneModel, batch, generator, cfg: TrainConfig, t=None, eps=None):
    out = model(batch, generator, t=t, eps=eps)
    traj, gt, gmask = out["traj"], batch["gt"], batch["gt_mask"]
    with torch.no_grad():
        if cfg.selection == "ade":
            score = modal_ade(traj, gt, gmask)
        else:
            score = modal_huber(traj, gt, gmask, cfg.huber_delta)
        best = torch.argmin(score, dim=-1)
    idx = best[..., None, None, None].expand(*best.shape, 1, *traj.shape[-2:])
    best_traj = traj.gather(-3, idx).squeeze(-3)
    l_reg = regression_loss(best_traj, gt, gmask, cfg.huber_delta)
    probs = modality_probabilities(out["logits"])
    l_cls = classification_loss(probs, best, batch["pred_mask"])
    l_diff = out["l_diff"]
    return {"l_diff": l_diff, "l_reg": l_reg, "l_cls": l_cls, "l_total": total_loss(l_diff, l_reg, l_cls)}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SceneModel
    epoch_log: list
    step_log: list
    best_val_ade: float = math.inf
    out_dir: Optional[Path] = None


def build_model(cfg: TrainConfig) -> SceneModel:
    return SceneModel(cfg.validate()).to(cfg.torch_dtype)


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def _param_names(model):
    return [n for n, _ in model.named_parameters()]


def save_training_checkpoint(path, model, opt, generator, cfg, epoch, step, best_val):
    names = _param_names(model)
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update(opt.state_tensors(names))
    tensors["rng/torch"] = generator.get_state()
    meta = {
        "config": to_plain(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "epoch": epoch,
        "step": step,
        "adam_step": opt.state.step,
        "best_val_ade": best_val if math.isfinite(best_val) else None,
    }
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple:
    """Rebuild a model from a checkpoint; returns ``(model, config, tensors, manifest)``."""
    tensors, manifest = load_checkpoint(path)
    cfg = TrainConfig.from_dict(manifest["config"])
    model = build_model(cfg)
    state = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return model, cfg, tensors, manifest


def total_steps(cfg: TrainConfig, n_train: int) -> int:
    per_epoch = math.ceil(n_train / cfg.batch_size)
    steps = cfg.epochs * per_epoch
    return min(steps, cfg.max_steps) if cfg.max_steps > 0 else steps


def train(cfg: TrainConfig, corpus, val=None, out_dir=None, resume=None, progress=None) -> TrainResult:
    """Train on ``corpus`` (list of scenarios with futures).

    Writes ``metrics.csv``, ``last.ckpt`` and ``best.ckpt`` under ``out_dir``
    when given. With ``resume`` pointing at a checkpoint written by this
    function, training continues from the epoch after it.
    """
    cfg.validate()
    if not corpus:
        raise ValidationError("training corpus is empty")
    if any(s.T_f != cfg.T_f for s in corpus):
        raise ValidationError(f"corpus horizon differs from T_f={cfg.T_f}")
    dtype = cfg.torch_dtype
    model = build_model(cfg)
    opt = Adam(model.parameters())
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(corpus)
    per_epoch = math.ceil(n / cfg.batch_size)
    n_total = total_steps(cfg, n)
    start_epoch, step, best_val = 0, 0, math.inf
    epoch_log, step_log = [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model, _, tensors, manifest = load_model(resume)
        model = model.to(dtype)
        opt = Adam(model.parameters())
        opt.load_state_tensors(_param_names(model), tensors, manifest["adam_step"])
        generator.set_state(tensors["rng/torch"])
        start_epoch = manifest["epoch"] + 1
        step = manifest["step"]
        best_val = manifest["best_val_ade"] if manifest["best_val_ade"] is not None else math.inf

    cache = {}

    def get_batch(indices):
        key = tuple(indices)
        if key not in cache:
            if len(cache) > 256:
                cache.clear()
            cache[key] = collate([corpus[i] for i in indices], cfg.n_points, dtype)
        return cache[key]

    metrics_path = out_dir / "metrics.csv" if out_dir is not None else None
    if metrics_path is not None and resume is None:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)

    t0 = time.time()
    for epoch in range(start_epoch, cfg.epochs):
        if step >= n_total:
            break
        order = _epoch_order(cfg.seed, epoch, n)
        sums = {"l_diff": 0.0, "l_reg": 0.0, "l_cls": 0.0, "l_total": 0.0}
        n_steps = 0
        lr = cfg.lr_init
        model.train()
        for b in range(per_epoch):
            if step >= n_total:
                break
            idx = sorted(order[b * cfg.batch_size : (b + 1) * cfg.batch_size].tolist())
            batch = get_batch(idx)
            lr = cosine_lr(step, n_total, cfg.lr_init, cfg.lr_min) if cfg.schedule == "cosine" else cfg.lr_init
            opt.zero_grad()
            losses = compute_losses(model, batch, generator, cfg)
            losses["l_total"].backward()
            try:
                check_finite([p.grad for p in opt.params])
            except NonFiniteGradient:
                log.error("non-finite gradient at step %d; aborting (last checkpoint kept)", step)
                raise
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(opt.params, cfg.grad_clip)
            opt.step(lr)
            row = {k: float(losses[k].detach()) for k in ("l_diff", "l_reg", "l_cls")}
            # summed in double so the logged parts add up exactly in float32 runs too
            row["l_total"] = row["l_diff"] + row["l_reg"] + row["l_cls"]
            row.update(step=step, epoch=epoch, lr=lr)
            step_log.append(row)
            for k in sums:
                sums[k] += row[k]
            n_steps += 1
            step += 1

        val_ade = None
        if val and cfg.eval_every > 0 and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1 or step >= n_total):
            val_ade = validation_ade(model, val, cfg)
        means = {k: v / max(n_steps, 1) for k, v in sums.items()}
        erow = {"epoch": epoch, "step": step, **means, "lr": lr, "val_ade": val_ade}
        epoch_log.append(erow)
        if progress is not None:
            progress(erow)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [epoch, step] + [repr(means[k]) for k in ("l_diff", "l_reg", "l_cls", "l_total")]
                    + [repr(lr), "" if val_ade is None else repr(val_ade)]
                )
        improved = val_ade is not None and val_ade < best_val
        if improved:
            best_val = val_ade
        if out_dir is not None:
            last = epoch == cfg.epochs - 1 or step >= n_total
            if last or (cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0):
                save_training_checkpoint(out_dir / "last.ckpt", model, opt, generator, cfg, epoch, step, best_val)
            if improved or (val is None and last):
                save_training_checkpoint(out_dir / "best.ckpt", model, opt, generator, cfg, epoch, step, best_val)
    log.info("trained %d steps in %.1fs", step, time.time() - t0)
    model.eval()
    return TrainResult(model, epoch_log, step_log, best_val, out_dir)


@torch.no_grad()
def predict(model: SceneModel, scenarios, seed=0, batch_size=64):
    """Trajectories ``[Ap, M, T_f, 4]`` and probabilities ``[Ap, M]`` per scenario."""
    cfg = model.cfg
    generator = torch.Generator().manual_seed(seed)
    out = []
    for i in range(0, len(scenarios), batch_size):
        chunk = scenarios[i : i + batch_size]
        batch = collate(chunk, cfg.n_points, model.dtype, with_future=False)
        traj, probs = model.generate(batch, generator)
        for j, n in enumerate(batch["num_predicted"]):
            out.append((traj[j, :n].double().numpy(), probs[j, :n].double().numpy()))
    return out


def validation_ade(model, scenarios, cfg: TrainConfig, seed=12345) -> float:
    """Mean ADE of the most probable modality over all predicted agents."""
    model.eval()
    preds = predict(model, scenarios, seed)
    model.train()
    from .evaluation import top_modality_ade  # local import: evaluation depends on training

    total, count = 0.0, 0
    for s, (traj, probs) in zip(scenarios, preds):
        for a, ag in enumerate(s.predicted_agents):
            total += top_modality_ade(traj[a], probs[a], ag.states[s.T_h :, :2], ag.valid[s.T_h :])
            count += 1
    return total / max(count, 1)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw).validate()
