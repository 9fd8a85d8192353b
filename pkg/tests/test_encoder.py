import torch

from scenediff.encoder import AgentEmbedding, EncoderConfig, LightEmbedding, MapEmbedding, SceneEncoder
from scenediff.scene import ATTR_DIM


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def randomize(module, seed=7, scale=0.2):
    g = gen(seed)
    for p in module.parameters():
        p.data = torch.randn(p.shape, generator=g, dtype=p.dtype) * scale


def inputs(B=2, Ap=3, Aw=4, S=5, L=6, P=7, N=3, seed=1):
    g = gen(seed)
    f64 = torch.float64
    return {
        "e_pred": torch.randn(B, Ap, S, 16, generator=g, dtype=f64),
        "e_world": torch.randn(B, Aw, S, 16, generator=g, dtype=f64),
        "e_map": torch.randn(B, L, 16, generator=g, dtype=f64),
        "e_lights": torch.randn(B, N, S + 1, 16, generator=g, dtype=f64),
        "masks": {
            "pred_step": torch.rand(B, Ap, S, generator=g) > 0.2,
            "world_step": torch.rand(B, Aw, S, generator=g) > 0.3,
            "map": torch.rand(B, L, generator=g) > 0.3,
            "light": torch.rand(B, N, generator=g) > 0.3,
        },
    }


def encoder(**kw):
    cfg = EncoderConfig(model_dim=16, heads=4, n_other_agent_blocks=2, n_map_blocks=2, n_light_blocks=1, latent_dim=8, **kw)
    enc = SceneEncoder(cfg, gen()).double()
    randomize(enc)
    return enc


def test_agent_embedding_properties():
    emb = AgentEmbedding(16, gen()).double()
    pos = torch.randn(3, 10, 2, dtype=torch.float64)
    attrs = torch.randn(3, ATTR_DIM, dtype=torch.float64)
    out = emb(pos, attrs)
    assert out.shape == (3, 10, 16) and torch.all(out >= 0)
    for p in (emb.phi_p, emb.phi_f):
        p.weight.data.zero_()
        p.bias.data.zero_()
    out = emb(pos, attrs)
    assert torch.all(out == out[0, 0])


def test_light_embedding_distinguishes_states():
    emb = LightEmbedding(16, gen()).double()
    feats = torch.zeros(4, 1, 6, dtype=torch.float64)
    feats[torch.arange(4), 0, 2 + torch.arange(4)] = 1.0
    out = emb(feats)[:, 0]
    assert out.shape == (4, 16)
    assert torch.cdist(out, out).add(torch.eye(4, dtype=torch.float64)).min() > 1e-6
    assert emb(torch.zeros(0, 11, 6, dtype=torch.float64)).shape == (0, 11, 16)


def test_map_embedding_pooling():
    emb = MapEmbedding(16, gen()).double()
    pts = torch.randn(1, 2, 5, 6, dtype=torch.float64)
    pts[0, 1] = pts[0, 0, [0, 0, 1, 1, 2]]
    mask = torch.ones(1, 2, 5, dtype=torch.bool)
    mask[0, 0, 3:] = False
    pts[0, 0, 3:] = 99.0  # masked points must not matter
    out = emb(pts, mask)
    assert out.shape == (1, 2, 16)
    assert torch.allclose(out[0, 0], out[0, 1])


def test_invariances_and_equivariance():
    enc = encoder()
    x = inputs()
    base = enc.run_formers(x["e_pred"], x["e_world"], x["e_map"], x["e_lights"], x["masks"])
    m = x["masks"]
    pw, pl, pn = torch.randperm(4, generator=gen(2)), torch.randperm(6, generator=gen(3)), torch.randperm(3, generator=gen(4))
    out = enc.run_formers(
        x["e_pred"], x["e_world"][:, pw], x["e_map"][:, pl], x["e_lights"][:, pn],
        {"pred_step": m["pred_step"], "world_step": m["world_step"][:, pw], "map": m["map"][:, pl], "light": m["light"][:, pn]},
    )
    assert torch.allclose(out, base, atol=1e-10)
    pp = torch.tensor([2, 0, 1])
    out = enc.run_formers(x["e_pred"][:, pp], x["e_world"], x["e_map"], x["e_lights"], {**m, "pred_step": m["pred_step"][:, pp]})
    assert torch.allclose(out, base[:, pp], atol=1e-10)


def test_masked_world_agents_are_identity_at_zero_init():
    cfg = EncoderConfig(model_dim=16, heads=4, n_self_blocks=0, n_other_agent_blocks=2, n_map_blocks=0, n_light_blocks=0, latent_dim=8)
    enc = SceneEncoder(cfg, gen()).double()
    x = inputs()
    x["masks"]["world_step"][:] = False
    out = enc.run_formers(x["e_pred"], x["e_world"], x["e_map"], x["e_lights"], x["masks"])
    assert torch.equal(out, x["e_pred"])


def test_fusion_identity_and_shapes():
    cfg = EncoderConfig(model_dim=16, heads=4, latent_dim=8)
    enc = SceneEncoder(cfg, gen()).double()
    former = torch.randn(2, 3, 5, 16, dtype=torch.float64)
    mask = torch.ones(2, 3, 5, dtype=torch.bool)
    enc_nofuse = SceneEncoder(EncoderConfig(model_dim=16, heads=4, latent_dim=8, n_fusion_blocks=0), gen()).double()
    feats = enc_nofuse.fuse_temporal_spatial(former, torch.zeros(2, 3, 5, 8, dtype=torch.float64), mask)
    assert torch.equal(feats.fused, former)
    feats = enc.fuse_temporal_spatial(former, torch.randn(2, 3, 5, 8, dtype=torch.float64), mask)
    assert feats.fused.shape == (2, 3, 5, 16) and feats.pooled.shape == (2, 3, 16)
    assert torch.equal(feats.pooled, feats.fused[:, :, -1])


def test_no_map_former_ablation_and_fuzz():
    enc = encoder(n_self_blocks=1)
    assert len(encoder(n_self_blocks=1).map_blocks) == 2
    no_map = SceneEncoder(EncoderConfig(model_dim=16, heads=4, n_map_blocks=0, latent_dim=8), gen())
    assert len(no_map.map_blocks) == 0
    for seed in range(5):
        x = inputs(seed=seed)
        out = enc.run_formers(x["e_pred"] * 10, x["e_world"] * 10, x["e_map"], x["e_lights"], x["masks"])
        assert torch.isfinite(out).all()
