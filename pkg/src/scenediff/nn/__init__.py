"""Differentiable-computation substrate: layers, optimizer, schedule, checks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, gradient_check
from .layers import (
    MLP,
    AttentionResult,
    GRUCell,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    attention,
    gru_step,
    layer_norm,
    linear,
    sinusoidal_embedding,
)
from .optim import Adam, AdamState, adam_step, cosine_lr

__all__ = [
    "MLP",
    "Adam",
    "AdamState",
    "AttentionResult",
    "GRUCell",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "MultiHeadAttention",
    "adam_step",
    "attention",
    "cosine_lr",
    "gradient_check",
    "gru_step",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "save_checkpoint",
    "sinusoidal_embedding",
]
