"""Reverse-mode gradients versus central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float
    worst: tuple = ()
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradient_check(fn, params, tol=1e-4, step=1e-5, max_entries=None, generator=None, floor=1e-6):
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    ``params`` is a dict name -> tensor (float64, requires_grad) or a list.
    With ``max_entries`` set, that many coordinates per tensor are sampled,
    otherwise every coordinate is checked. The relative error of a coordinate
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)

    worst, max_rel, max_abs, n = (), 0.0, 0.0, 0
    per_param = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            if max_entries is None or flat.numel() <= max_entries:
                idx = range(flat.numel())
            else:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries].tolist()
            p_rel = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                analytic = g.view(-1)[i].item()
                abs_err = abs(analytic - numeric)
                rel = abs_err / max(abs(analytic), abs(numeric), floor)
                n += 1
                p_rel = max(p_rel, rel)
                max_abs = max(max_abs, abs_err)
                if rel > max_rel:
                    max_rel = rel
                    worst = (name, i, analytic, numeric)
            per_param[name] = p_rel
    return GradCheckReport(max_rel, max_abs, n, tol, worst, per_param)
