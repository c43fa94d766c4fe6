import math

import numpy as np
import pytest
import torch

from conftest import central_diff, rel_err, tiny_config
from mcsynth.nets import (
    AttentionAutoencoder,
    Discriminator,
    FeatureBundle,
    Generator,
    GeneratorConfig,
    SelfAttention,
    build_models,
    param_hash,
    self_attention,
    time_embed,
)


def _inputs(cfg, b=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    s = cfg.image_size
    x = torch.rand(b, cfg.in_channels_target, s, s, generator=g, dtype=dtype) * 2 - 1
    y = torch.rand(b, cfg.in_channels_cond, s, s, generator=g, dtype=dtype) * 2 - 1
    z = torch.randn(b, cfg.z_dim, generator=g, dtype=dtype)
    t = torch.randint(1, 5, (b,), generator=g)
    return x, y, z, t


def _zero_biases(model):
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()


# --- time embedding -------------------------------------------------------------

def test_time_embed_zero():
    v = time_embed(0, 8)
    assert torch.equal(v, torch.tensor([0.0, 1.0] * 4, dtype=torch.float64))


def test_time_embed_t1_dim2():
    v = time_embed(1, 2)
    assert v.tolist() == pytest.approx([math.sin(1), math.cos(1)], abs=1e-12)
    assert v.tolist() == pytest.approx([0.8415, 0.5403], abs=1e-4)


def test_time_embed_formula_and_distinct():
    dim = 64
    v = time_embed(torch.arange(1, 5), dim)
    for t in range(1, 5):
        for i in range(dim // 2):
            w = 10000 ** (-2 * i / dim)
            assert float(v[t - 1, 2 * i]) == pytest.approx(math.sin(t * w), abs=1e-12)
            assert float(v[t - 1, 2 * i + 1]) == pytest.approx(math.cos(t * w), abs=1e-12)
    assert float((time_embed(1, dim) - time_embed(2, dim)).norm()) > 0


def test_time_embed_odd_dim():
    with pytest.raises(ValueError):
        time_embed(1, 7)


# --- attention --------------------------------------------------------------

def test_zero_query_gives_uniform_rows():
    layer = SelfAttention(8, heads=2)
    with torch.no_grad():
        layer.q.weight.zero_()
        layer.q.bias.zero_()
    out, rec = layer(torch.randn(3, 8, 4, 4))
    assert torch.equal(rec.raw, torch.full_like(rec.raw, 1 / 16))
    assert out.shape == (3, 8, 4, 4)


def test_attention_rows_sum_to_one():
    torch.manual_seed(0)
    layer = SelfAttention(16, heads=4)
    _, rec = layer(torch.randn(2, 16, 5, 5) * 3)
    assert rec.raw.shape == (2, 4, 25, 25)
    assert torch.allclose(rec.raw.sum(-1), torch.ones(2, 4, 25), atol=1e-6)


def test_attention_hand_two_by_two():
    layer = SelfAttention(1, heads=1, groups=1).double()
    qw, kw = 0.7, -1.3
    with torch.no_grad():
        layer.q.weight.fill_(qw)
        layer.q.bias.zero_()
        layer.k.weight.fill_(kw)
        layer.k.bias.zero_()
    f = torch.tensor([[[0.5], [2.0]]], dtype=torch.float64)  # B=1, HW=2, C=1
    a = layer.weights(f)[0, 0].detach()
    q = [qw * 0.5, qw * 2.0]
    k = [kw * 0.5, kw * 2.0]
    for i in range(2):
        s = [q[i] * k[j] for j in range(2)]
        e = [math.exp(v) for v in s]
        for j in range(2):
            assert float(a[i, j]) == pytest.approx(e[j] / sum(e), abs=1e-8)
    out, _ = self_attention(f, layer)
    assert out.shape == f.shape


def test_attention_heads_must_divide():
    with pytest.raises(ValueError):
        SelfAttention(6, heads=4)
    layer = SelfAttention(8, heads=2)
    with pytest.raises(ValueError):
        layer.weights(torch.zeros(1, 4, 6))


# --- semantic / diffusive encoders ---------------------------------------------

def test_semantic_encoder_zero_input(tiny_cfg):
    g = Generator(tiny_cfg)
    _zero_biases(g.se)
    f = g.semantic_encode(torch.zeros(2, 2, 16, 16))
    for s in f.skips + [f.bottleneck]:
        assert torch.count_nonzero(s) == 0


def test_semantic_encoder_batch_independence(tiny_cfg):
    torch.manual_seed(1)
    g = Generator(tiny_cfg)
    y = torch.randn(2, 2, 16, 16)
    both = g.semantic_encode(y)
    for i in range(2):
        one = g.semantic_encode(y[i:i + 1])
        for a, b in zip(both.skips, one.skips):
            assert torch.allclose(a[i:i + 1], b, atol=1e-6)
        assert torch.allclose(both.bottleneck[i:i + 1], one.bottleneck, atol=1e-6)


def test_desk_shapes():
    cfg = GeneratorConfig()  # 64x64, 3 scales
    g = Generator(cfg)
    f = g.semantic_encode(torch.zeros(1, 2, 64, 64))
    assert [s.shape[-1] for s in f.skips] == [64, 32, 16]
    assert f.bottleneck.shape[-1] == 8
    x0_hat, recs = g(*_inputs(cfg, b=1))
    assert x0_hat.shape == (1, 1, 64, 64)
    assert all(r.spatial == (16, 16) for r in recs)


def test_config_invariants():
    with pytest.raises(ValueError):
        GeneratorConfig(image_size=60, num_scales=3)
    with pytest.raises(ValueError):
        GeneratorConfig(attention_resolution=12)


def test_diffusive_encoder_no_multiscale(tiny_cfg):
    torch.manual_seed(2)
    g = Generator(tiny_cfg)
    x, y, z, t = _inputs(tiny_cfg)
    emb = g.cond(t, z, like=x)
    se = g.semantic_encode(y)
    out = g.diffusive_encode(x, se, emb, multiscale=False)
    zero = FeatureBundle([torch.zeros_like(s) for s in se.skips], se.bottleneck)
    ref = g.diffusive_encode(x, zero, emb, multiscale=True)
    assert torch.equal(out.bottleneck, ref.bottleneck)
    assert torch.isfinite(out.bottleneck).all()


def test_diffusive_encoder_modulation_identity_at_init(tiny_cfg):
    torch.manual_seed(3)
    g = Generator(tiny_cfg)
    x, y, z, t = _inputs(tiny_cfg)
    se = g.semantic_encode(y)
    cond = g.diffusive_encode(x, se, g.cond(t, z, like=x))
    plain = g.diffusive_encode(x, se, None)
    assert torch.equal(cond.bottleneck, plain.bottleneck)


def test_diffusive_encoder_scale_mismatch(tiny_cfg):
    g = Generator(tiny_cfg)
    x, y, z, t = _inputs(tiny_cfg)
    se = g.semantic_encode(y)
    with pytest.raises(ValueError):
        g.diffusive_encode(x, FeatureBundle(se.skips[:1], se.bottleneck), None)


def test_diffusive_encoder_sensitive_to_conditions(tiny_cfg):
    torch.manual_seed(4)
    g = Generator(tiny_cfg)
    x, y, z, t = _inputs(tiny_cfg)
    opt = torch.optim.Adam(g.parameters(), lr=1e-3)
    out, _ = g(x, y, z, t)
    (out - x).abs().mean().backward()
    opt.step()
    emb = g.cond(t, z, like=x)
    a = g.diffusive_encode(x, g.semantic_encode(y), emb).bottleneck
    b = g.diffusive_encode(x, g.semantic_encode(-y), emb).bottleneck
    assert float((a - b).detach().norm()) > 0


# --- generator ---------------------------------------------------------------------

def test_generator_range_and_shape(tiny_cfg):
    g = Generator(tiny_cfg)
    x, y, z, t = _inputs(tiny_cfg, b=3)
    out, recs = g(x * 50, y * 50, z, t)
    assert out.shape == x.shape
    assert torch.all(out.abs() < 1)
    assert len(recs) == tiny_cfg.resnet_blocks_per_scale
    for r in recs:
        assert torch.allclose(r.raw.sum(-1), torch.ones_like(r.raw.sum(-1)), atol=1e-6)


def test_generator_pixel_gradient_finite_difference(tiny_cfg):
    torch.manual_seed(5)
    g = Generator(tiny_cfg).double()
    x, y, z, t = _inputs(tiny_cfg, dtype=torch.float64)

    def f(xx):
        return g(xx, y, z, t)[0].mean()

    xg = x.clone().requires_grad_(True)
    f(xg).backward()
    for idx in [(0, 0, 3, 4), (1, 0, 10, 7), (0, 0, 15, 0)]:
        fd = central_diff(f, x, idx)
        assert rel_err(float(xg.grad[idx]), fd) < 1e-4


def test_generator_ablation_variants():
    for kw in (dict(use_fm=False), dict(multiscale=False), dict(in_channels_cond=1), dict(fm_join="add")):
        cfg = tiny_config(**kw)
        g = Generator(cfg)
        out, _ = g(*_inputs(cfg))
        assert torch.isfinite(out).all()


# --- discriminator ----------------------------------------------------------------

def test_discriminator_basic(tiny_cfg):
    d = Discriminator(tiny_cfg)
    x, _, _, t = _inputs(tiny_cfg, b=3)
    logits = d(x, x * 0.5, t)
    assert logits.shape == (3,)
    assert torch.isfinite(logits).all()
    same = d(x[:1].repeat(3, 1, 1, 1), x[:1].repeat(3, 1, 1, 1), torch.full((3,), 2))
    assert torch.allclose(same, same[0].expand(3))


def test_discriminator_gradient_finite_difference(tiny_cfg):
    torch.manual_seed(6)
    d = Discriminator(tiny_cfg).double()
    x, _, _, t = _inputs(tiny_cfg, dtype=torch.float64)
    xt = torch.randn_like(x)

    def f(xp):
        return d(xp, xt, t)[0]

    xg = x.clone().requires_grad_(True)
    f(xg).backward()
    for idx in [(0, 0, 2, 2), (0, 0, 9, 13)]:
        assert rel_err(float(xg.grad[idx]), central_diff(f, x, idx)) < 1e-4


def test_discriminator_with_conditions():
    cfg = tiny_config(disc_sees_cond=True)
    d = Discriminator(cfg)
    x, y, _, t = _inputs(cfg)
    assert d(x, x, t, y).shape == (2,)
    with pytest.raises(ValueError):
        d(x, x, t)


# --- autoencoder ------------------------------------------------------------------

def test_autoencoder_alignment(tiny_cfg):
    g, _, ae = build_models(tiny_cfg, 0)
    x, y, z, t = _inputs(tiny_cfg)
    _, g_recs = g(x, y, z, t)
    rec, ae_recs = ae(x)
    assert rec.shape == x.shape
    assert len(g_recs) == len(ae_recs) > 0
    assert [r.spatial for r in g_recs] == [r.spatial for r in ae_recs]
    for r in ae_recs:
        assert torch.allclose(r.raw.sum(-1), torch.ones_like(r.raw.sum(-1)), atol=1e-6)
    with pytest.raises(ValueError):
        ae(torch.zeros(1, 1, 8, 8))


def test_init_determinism(tiny_cfg):
    a = [param_hash(m) for m in build_models(tiny_cfg, 7)]
    b = [param_hash(m) for m in build_models(tiny_cfg, 7)]
    c = [param_hash(m) for m in build_models(tiny_cfg, 8)]
    assert a == b
    assert a[0] != c[0]
    assert np.all([len(h) == 64 for h in a])
