import math

import pytest
import torch

from scenediff.errors import NonFiniteGradient, RangeError, ShapeError
from scenediff.nn import (
    AdamState,
    GRUCell,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    adam_step,
    attention,
    cosine_lr,
    gradient_check,
    gru_step,
    layer_norm,
    linear,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_embedding,
)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_linear_cases():
    x = torch.tensor([[1.0, 2.0]])
    assert torch.equal(linear(x, torch.eye(2), torch.zeros(2)), x)
    assert torch.equal(linear(x, torch.zeros(2, 3), torch.full((3,), 7.0)), torch.full((1, 3), 7.0))
    assert torch.equal(linear(x, torch.tensor([[1.0], [1.0]]), torch.tensor([0.0])), torch.tensor([[3.0]]))
    with pytest.raises(ShapeError):
        linear(torch.ones(1, 3), torch.eye(2))


def test_linear_init_deterministic_and_bounded():
    a, b = Linear(8, 4, gen(3)), Linear(8, 4, gen(3))
    assert torch.equal(a.weight, b.weight) and torch.equal(a.bias, b.bias)
    assert a.weight.abs().max() <= 1 / math.sqrt(8)


def test_layer_norm_cases():
    assert torch.allclose(layer_norm(torch.tensor([[5.0, 5.0, 5.0]])), torch.zeros(1, 3))
    out = layer_norm(torch.tensor([[-1.0, 1.0]], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([[-1.0, 1.0]], dtype=torch.float64), atol=1e-5)
    x = torch.randn(50, 16, generator=gen(), dtype=torch.float64) * 5 + 3
    assert layer_norm(x).mean(-1).abs().max() < 1e-6
    ln = LayerNorm(16)
    assert torch.equal(ln.weight, torch.ones(16)) and torch.equal(ln.bias, torch.zeros(16))


def test_attention_singleton_and_ties():
    v = torch.tensor([[[2.0, -1.0]]])
    assert torch.equal(attention(torch.ones(1, 1, 2), torch.ones(1, 1, 2), v).output, v)
    k = torch.tensor([[[1.0, 0.0], [1.0, 0.0]]])
    vv = torch.tensor([[[1.0, 2.0], [3.0, 6.0]]])
    out = attention(torch.tensor([[[0.5, 0.5]]]), k, vv).output
    assert torch.allclose(out, torch.tensor([[[2.0, 4.0]]]))


def test_masking_matches_single_key():
    q = torch.randn(1, 3, 4, generator=gen())
    k = torch.randn(1, 2, 4, generator=gen(1))
    v = torch.randn(1, 2, 4, generator=gen(2))
    masked = attention(q, k, v, torch.tensor([True, False])).output
    single = attention(q, k[:, :1], v[:, :1]).output
    assert torch.equal(masked, single)


def test_all_masked_rows_are_zero_and_flagged():
    res = attention(torch.randn(2, 3, 4), torch.randn(2, 5, 4), torch.randn(2, 5, 4), torch.zeros(5, dtype=torch.bool))
    assert torch.all(res.output == 0) and res.all_masked.all()
    mha = MultiHeadAttention(8, 2, gen())
    out = mha(torch.randn(1, 3, 8), torch.randn(1, 4, 8), key_mask=torch.zeros(1, 4, dtype=torch.bool))
    assert torch.all(out == 0)


def test_attention_rows_sum_and_key_permutation():
    mha = MultiHeadAttention(16, 4, gen()).double()
    q = torch.randn(2, 5, 16, generator=gen(1), dtype=torch.float64)
    kv = torch.randn(2, 7, 16, generator=gen(2), dtype=torch.float64)
    mask = torch.rand(2, 7, generator=gen(3)) > 0.3
    mask[:, 0] = True
    out, w, _ = mha(q, kv, key_mask=mask, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)
    assert torch.all(w[~mask[:, None, None, :].expand_as(w)] == 0)
    perm = torch.randperm(7, generator=gen(4))
    out2 = mha(q, kv[:, perm], key_mask=mask[:, perm])
    assert torch.allclose(out, out2, atol=1e-12)
    with pytest.raises(ShapeError):
        MultiHeadAttention(10, 4, gen())


def test_gru_zero_params():
    h = torch.tensor([[0.4, -2.0]])
    x = torch.tensor([[1.0, 3.0, -1.0]])
    z2 = torch.zeros(5, 2)
    zb = torch.zeros(2)
    out = gru_step(h, x, z2, zb, z2, zb, z2, zb)
    assert torch.allclose(out, 0.5 * h)
    assert torch.equal(gru_step(torch.zeros(1, 2), x, z2, zb, z2, zb, z2, zb), torch.zeros(1, 2))


def test_gru_output_in_convex_hull():
    cell = GRUCell(3, 6, gen())
    h = torch.randn(20, 6, generator=gen(1)) * 3
    out = cell(h, torch.randn(20, 3, generator=gen(2)))
    lo = torch.minimum(h, torch.full_like(h, -1.0))
    hi = torch.maximum(h, torch.full_like(h, 1.0))
    assert torch.all(out >= lo) and torch.all(out <= hi)


def test_adam_cases():
    p = torch.tensor([1.0, -2.0])
    state = adam_step(AdamState(), [p], [torch.zeros(2)], lr=0.1)
    assert torch.equal(p, torch.tensor([1.0, -2.0]))
    assert torch.all(state.m[0] == 0) and torch.all(state.v[0] == 0)

    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    adam_step(AdamState(), [p], [torch.tensor([3.0, -0.5], dtype=torch.float64)], lr=0.01)
    assert torch.allclose(p, torch.tensor([0.99, -1.99], dtype=torch.float64), atol=1e-8)

    p = torch.tensor([1.0])
    st = AdamState()
    with pytest.raises(NonFiniteGradient):
        adam_step(st, [p], [torch.tensor([float("nan")])], lr=0.1)
    assert st.step == 0 and p.item() == 1.0


def test_cosine_lr():
    assert cosine_lr(0, 100, 2e-4, 0) == 2e-4
    assert cosine_lr(100, 100, 2e-4, 1e-6) == pytest.approx(1e-6)
    assert cosine_lr(50, 100, 2e-4, 0) == pytest.approx(1e-4)
    with pytest.raises(RangeError):
        cosine_lr(101, 100, 2e-4)


def test_gradcheck_quadratic_and_layers():
    p = torch.randn(6, generator=gen(), dtype=torch.float64, requires_grad=True)
    rep = gradient_check(lambda: (p**2).sum(), [p], tol=1e-8)
    assert rep.passed and rep.n_checked == 6

    delta = 1.0
    r = torch.tensor([0.3, -1.7, 2.2, 0.999], dtype=torch.float64, requires_grad=True)
    from scenediff.training import huber

    assert gradient_check(lambda: huber(r, delta).sum(), [r]).passed

    mha = MultiHeadAttention(8, 2, gen()).double()
    g5 = gen(5)
    for q in mha.parameters():
        q.data = torch.randn(q.shape, generator=g5, dtype=torch.float64) * 0.3
    x = torch.randn(2, 4, 8, generator=gen(6), dtype=torch.float64)
    rep = gradient_check(lambda: mha(x, x).pow(2).mean(), dict(mha.named_parameters()))
    assert rep.passed, rep.max_rel_error


def test_sinusoidal_embedding():
    e = sinusoidal_embedding(torch.arange(5), 8)
    assert e.shape == (5, 8)
    assert torch.allclose(e[0], torch.tensor([1.0, 1, 1, 1, 0, 0, 0, 0], dtype=torch.float64))


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    tensors = {
        "a": torch.randn(3, 4, generator=gen()),
        "b": torch.randn(2, dtype=torch.float64, generator=gen(1)),
        "c": torch.arange(5),
        "d": torch.tensor([True, False]),
    }
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"seed": 1})
    save_checkpoint(tmp_path / "y.ckpt", tensors, {"seed": 1})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    back, manifest = load_checkpoint(tmp_path / "x.ckpt")
    assert manifest["seed"] == 1
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)
