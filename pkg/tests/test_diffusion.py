import math

import numpy as np
import pytest
import torch

from scenediff.diffusion import (
    DiTDenoiser,
    MLPDenoiser,
    diffusion_loss,
    forward_noise,
    make_schedule,
    noise_with,
    predict_x0,
    sample_latents,
)
from scenediff.errors import RangeError, ShapeError


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_schedule_cases():
    s = make_schedule(1, 1e-3, 0.02)
    assert s.betas.tolist() == [1e-3] and s.alpha_bars.tolist() == [1 - 1e-3]
    s = make_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] == pytest.approx(4.0e-5, rel=0.05)
    assert s.alpha_bars[0] == s.alphas[0]
    with pytest.raises(RangeError):
        make_schedule(0)
    with pytest.raises(RangeError):
        make_schedule(10, 0.1, 0.01)


def test_forward_noise_limits_and_range():
    x0 = torch.randn(3, 2, 4, 5, generator=gen(), dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen(1), dtype=torch.float64)
    assert torch.equal(noise_with(torch.tensor(1.0, dtype=torch.float64), x0, eps), x0)
    assert torch.equal(noise_with(torch.tensor(0.0, dtype=torch.float64), x0, eps), eps)
    s = make_schedule(100)
    x_t = forward_noise(s, x0, torch.tensor([1, 50, 100]), eps)
    assert torch.allclose(predict_x0(s, x_t, torch.tensor([1, 50, 100]), eps), x0, atol=1e-12)
    with pytest.raises(RangeError):
        forward_noise(s, x0, 0, eps)
    with pytest.raises(RangeError):
        forward_noise(s, x0, 101, eps)
    with pytest.raises(ShapeError):
        forward_noise(s, x0, 1, eps[:1])


def test_half_noise_moments():
    x0 = torch.zeros(100_000, dtype=torch.float64)
    eps = torch.randn(100_000, generator=gen(), dtype=torch.float64)
    x = noise_with(torch.tensor(0.5, dtype=torch.float64), x0, eps)
    assert abs(x.mean().item()) < 0.01
    assert x.var().item() == pytest.approx(0.5, rel=0.01)


@pytest.mark.parametrize("cls", [DiTDenoiser, MLPDenoiser])
def test_denoiser_contracts(cls):
    den = cls(6, 16, 16, 4, 2, gen()).double()
    x = torch.randn(2, 3, 5, 6, generator=gen(1), dtype=torch.float64)
    cond = torch.randn(2, 3, 5, 16, generator=gen(2), dtype=torch.float64)
    out = den(x, torch.tensor([3, 7]), cond)
    assert out.shape == x.shape and torch.all(out == 0)  # zero-initialized output
    for p in den.parameters():
        p.data.normal_(0, 0.2, generator=gen(3))
    out = den(x, torch.tensor([3, 7]), cond)
    assert torch.equal(out, den(x, torch.tensor([3, 7]), cond))
    perm = torch.tensor([2, 0, 1])
    out_p = den(x[:, perm], torch.tensor([3, 7]), cond[:, perm])
    assert torch.allclose(out_p, out[:, perm], atol=1e-12)


def test_diffusion_loss_cases():
    s = make_schedule(10)
    x0 = torch.zeros(1, 1, 100, 1000, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen(), dtype=torch.float64)

    class Zero(torch.nn.Module):
        def forward(self, x, t, c, m=None):
            return torch.zeros_like(x)

    class Oracle(torch.nn.Module):
        def forward(self, x, t, c, m=None):
            return eps

    assert diffusion_loss(s, Zero(), x0, 5, eps, None).item() == pytest.approx(1.0, rel=0.02)
    assert diffusion_loss(s, Oracle(), x0, 5, eps, None).item() == 0.0


def test_sampler_one_step_and_determinism():
    s = make_schedule(1, 0.01, 0.01)

    class Zero(torch.nn.Module):
        def forward(self, x, t, c, m=None):
            return torch.zeros_like(x)

    cond = torch.zeros(1, 2, 3, 4, dtype=torch.float64)
    out = sample_latents(s, Zero(), cond, gen(9), shape=(1, 2, 3, 4))
    x1 = torch.randn((1, 2, 3, 4), generator=gen(9), dtype=torch.float64)
    assert torch.allclose(out, x1 / math.sqrt(0.99))

    den = DiTDenoiser(4, 8, 8, 2, 1, gen())
    c = torch.randn(1, 2, 3, 8, generator=gen(1))
    a = sample_latents(make_schedule(20), den, c, gen(5), shape=(1, 2, 3, 4))
    b = sample_latents(make_schedule(20), den, c, gen(5), shape=(1, 2, 3, 4))
    assert torch.equal(a, b) and a.shape == (1, 2, 3, 4) and torch.isfinite(a).all()


def test_toy_diffusion_recovers_moments():
    """Train a small denoiser on a 2-D Gaussian and compare sample moments."""
    torch.manual_seed(0)
    s = make_schedule(200, 1e-4, 0.05)
    mean = torch.tensor([1.5, -0.5], dtype=torch.float64)
    std = torch.tensor([0.5, 1.0], dtype=torch.float64)
    den = MLPDenoiser(2, 32, 2, 1, 1, gen()).double()
    opt = torch.optim.Adam(den.parameters(), lr=3e-3)
    g = gen(1)
    cond = torch.zeros(256, 1, 1, 2, dtype=torch.float64)
    for _ in range(1500):
        x0 = (mean + std * torch.randn(256, 2, generator=g, dtype=torch.float64))[:, None, None]
        eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        t = torch.randint(1, s.T + 1, (256,), generator=g)
        loss = diffusion_loss(s, den, x0, t, eps, cond)
        opt.zero_grad()
        loss.backward()
        opt.step()
    out = sample_latents(s, den, torch.zeros(4000, 1, 1, 2, dtype=torch.float64), gen(2), shape=(4000, 1, 1, 2))
    out = out.reshape(-1, 2)
    assert torch.allclose(out.mean(0), mean, atol=0.1 * mean.abs().max())
    assert torch.allclose(out.std(0), std, rtol=0.1)
