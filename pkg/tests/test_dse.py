import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from samoe_lab import dse
from samoe_lab.numerics import Rng


def test_near_field_three_by_three():
    g = dse.near_field_map(3, 3, (1, 1)).grid
    assert g[1, 1].item() == 1.0
    assert abs(g[0, 1].item() - 0.2928932188134524) < 1e-15
    assert g[0, 0].item() == 0.0


@given(st.integers(1, 30), st.integers(1, 30), st.data())
def test_near_field_range_and_monotone(H, W, data):
    c = (data.draw(st.integers(0, H - 1)), data.draw(st.integers(0, W - 1)))
    g = dse.near_field_map(H, W, c).grid
    assert g[c].item() == 1.0
    if H * W > 1:
        assert g.min().item() == 0.0
    ii, jj = torch.meshgrid(torch.arange(H), torch.arange(W), indexing="ij")
    dist = ((ii - c[0]) ** 2 + (jj - c[1]) ** 2).flatten().double()
    order = torch.argsort(dist, stable=True)
    vals = g.flatten()[order]
    assert bool((vals[1:] <= vals[:-1] + 1e-15).all())


def test_near_field_rejects_bad_center():
    with pytest.raises(dse.ConfigError):
        dse.near_field_map(4, 4, (4, 0))


@pytest.mark.parametrize("K", [1, 3, 5])
def test_zero_offsets_match_standard_conv(K, rng):
    f = rng.tensor_normal((2, 3, 7, 9))
    w = rng.tensor_normal((4, 3, K, K))
    b = rng.tensor_normal((4,))
    got = dse.deformable_conv(f, torch.zeros(2, 2 * K * K, 7, 9), w, b)
    assert (got - F.conv2d(f, w, b, padding=K // 2)).abs().max().item() <= 1e-5


def test_half_cell_offset_averages_straddled_cells():
    f = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
    f[0, 0, 2, 2] = 1.0
    w = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    off = torch.zeros(1, 2, 5, 5, dtype=torch.float64)
    off[:, 0] = 0.5
    out = dse.deformable_conv(f, off, w)[0, 0]
    # sampling rows 1.5 and 2.5 each straddle the impulse with weight one half
    assert out[1, 2].item() == 0.5 and out[2, 2].item() == 0.5
    assert out.sum().item() == 1.0


def test_offsets_outside_grid_contribute_zero():
    f = torch.ones(1, 2, 4, 4, dtype=torch.float64)
    w = torch.ones(1, 2, 3, 3, dtype=torch.float64)
    off = torch.full((1, 18, 4, 4), 100.0, dtype=torch.float64)
    assert dse.deformable_conv(f, off, w).abs().max().item() == 0.0


def test_scene_tokens_layout_and_normalisation(rng):
    x = rng.tensor_normal((2, 3, 4, 5), torch.float64)
    s = dse.scene_tokens(x)
    assert s.shape == (2, 20, 3)
    for h in range(4):
        for w in range(5):
            col = x[:, :, h, w]
            ref = (col - col.mean(-1, keepdim=True)) / torch.sqrt(col.var(-1, unbiased=False, keepdim=True) + 1e-5)
            assert torch.allclose(s[:, h * 5 + w], ref, atol=1e-12)
    assert dse.scene_tokens(torch.full((1, 3, 2, 2), 7.0)).abs().max().item() == 0.0


def _identity_mha(C):
    eye, zero = torch.eye(C, dtype=torch.float64), torch.zeros(C, dtype=torch.float64)
    return [eye, zero] * 4


def test_cross_attention_hand_case():
    q = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
    kv = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    out = dse.multihead_cross_attention(q, kv, *_identity_mha(2), heads=1)
    # softmax of scores (1/sqrt 2, 0), from a 30-digit evaluation
    w0, w1 = 0.6697615493266569, 0.3302384506733431
    assert torch.allclose(out[0, 0], torch.tensor([w0, w1], dtype=torch.float64), atol=1e-15)


def test_cross_attention_single_key_and_permutation(rng):
    C = 8
    params = [rng.tensor_normal(s, torch.float64) for s in [(C, C), (C,)] * 4]
    q = rng.tensor_normal((1, 3, C), torch.float64)
    kv = rng.tensor_normal((2, 1, C), torch.float64)
    out = dse.multihead_cross_attention(q, kv, *params, heads=2)
    wv, bv, wo, bo = params[4:]
    assert torch.allclose(out, ((kv @ wv + bv) @ wo + bo).expand(2, 3, C), atol=1e-12)
    kv = rng.tensor_normal((2, 6, C), torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    a = dse.multihead_cross_attention(q, kv, *params, heads=2)
    b = dse.multihead_cross_attention(q, kv[:, perm], *params, heads=2)
    assert torch.allclose(a, b, atol=1e-12)


def _encoder(seed=0, **kw):
    return dse.DeformableSceneEncoder(4, (8, 8), (4, 4), [1, 3], 3, hidden=8, heads=2, rng=Rng(seed, 1),
                                      dtype=torch.float64, **kw)


def test_fresh_offsets_are_zero_and_learn(rng):
    enc = _encoder()
    f = rng.tensor_normal((2, 4, 8, 8), torch.float64)
    off = enc.predict_offsets(f)
    assert off.shape == (2, 18, 8, 8) and off.abs().max().item() == 0.0
    loss = enc.routing_weights(enc(f), 1)[:, 0].sum() + enc(f).tokens.pow(2).sum()
    g = torch.autograd.grad(loss, [enc.offset_w, enc.offset_b])
    with torch.no_grad():
        enc.offset_w.sub_(0.1 * g[0])
        enc.offset_b.sub_(0.1 * g[1])
    assert enc.predict_offsets(f).abs().max().item() > 0


def test_routing_weights_examples(rng):
    enc = _encoder()
    h = enc(rng.tensor_normal((3, 4, 8, 8), torch.float64))
    uniform = dse.routing_weights(h, torch.zeros(8, 3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(uniform, torch.full((3, 3), 1 / 3, dtype=torch.float64), atol=1e-15)
    two = dse.routing_weights(h, torch.zeros(8, 2, dtype=torch.float64),
                              torch.tensor([math.log(2.0), 0.0], dtype=torch.float64))
    assert torch.allclose(two, torch.tensor([[2 / 3, 1 / 3]] * 3, dtype=torch.float64), atol=1e-15)
    pi = enc.routing_weights(h, 3)
    assert (pi.sum(-1) - 1).abs().max().item() <= 1e-6


def test_routing_is_lipschitz_in_the_scene():
    ratios = []
    for seed in range(2):
        enc = _encoder(seed)
        r = Rng(seed, 9)
        f = r.tensor_normal((1, 4, 8, 8), torch.float64)
        worst = 0.0
        with torch.no_grad():
            base = enc.routing_weights(enc(f), 1)
            for i in range(100):
                d = r.tensor_normal(f.shape, torch.float64)
                d = d * (1e-3 * r.uniform() / d.norm())
                worst = max(worst, float((enc.routing_weights(enc(f + d), 1) - base).norm() / d.norm()))
        ratios.append(worst)
    assert all(math.isfinite(x) for x in ratios)
    assert max(ratios) / min(ratios) < 10
