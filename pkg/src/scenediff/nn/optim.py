"""Adam and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from ..errors import NonFiniteGradient, RangeError

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def check_finite(grads):
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradient("gradient contains NaN or Inf")


@torch.no_grad()
def adam_step(state: AdamState, params, grads, lr, betas=(BETA1, BETA2), eps=ADAM_EPS) -> AdamState:
    """In-place Adam update of ``params`` with bias correction.

    Raises ``NonFiniteGradient`` before touching any parameter or moment.
    """
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    check_finite(grads)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


class Adam:
    """Adam over a fixed, ordered list of parameters."""

    def __init__(self, params, betas=(BETA1, BETA2), eps=ADAM_EPS):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        adam_step(self.state, self.params, [p.grad for p in self.params], lr, self.betas, self.eps)

    def state_tensors(self, names) -> dict:
        out = {}
        if self.state.m:
            for name, m, v in zip(names, self.state.m, self.state.v):
                out[f"adam_m/{name}"] = m
                out[f"adam_v/{name}"] = v
        return out

    def load_state_tensors(self, names, tensors, step):
        self.state.step = int(step)
        if step > 0:
            self.state.m = [tensors[f"adam_m/{n}"].clone() for n in names]
            self.state.v = [tensors[f"adam_v/{n}"].clone() for n in names]


def cosine_lr(step, total_steps, lr_init, lr_min=0.0):
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
