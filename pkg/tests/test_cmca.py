import math

import pytest
import torch
from hypothesis import given, strategies as st

from samoe_lab import cmca
from samoe_lab.moe import MergedFfn
from samoe_lab.numerics import DegenerateRowError, Rng

f64 = torch.float64


def test_mask_example():
    m = cmca.build_mask(cmca.CmcaLayout(4, (0, 1), (2, 3), 2))
    assert m.tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]]


def test_mask_degenerate_partitions():
    # with no action tokens every position is conditioning, so everything is visible
    m = cmca.build_mask(cmca.CmcaLayout(3, (0, 1, 2), (), 0))
    assert m.tolist() == [[1, 1, 1]] * 3
    m = cmca.build_mask(cmca.CmcaLayout(2, (), (0, 1), 2))
    assert m.tolist() == [[1, 0], [1, 1]]


@pytest.mark.parametrize("cond,act", [((0, 1), (1, 2)), ((0,), (2,)), ((0, 1), (3, 2))])
def test_layout_errors(cond, act):
    with pytest.raises(cmca.LayoutError):
        cmca.CmcaLayout(3 if 3 not in act else 4, cond, act, 1)


@given(st.integers(1, 20), st.data())
def test_mask_truth_table(L, data):
    perm = data.draw(st.permutations(range(L)))
    n_act = data.draw(st.integers(0, L))
    act = tuple(sorted(perm[:n_act]))
    cond = tuple(sorted(perm[n_act:]))
    m = cmca.build_mask(cmca.CmcaLayout(L, cond, act, n_act))
    for i in range(L):
        for j in range(L):
            assert bool(m[i, j]) == (j in cond or (i in act and j in act and j <= i))
    if cond:
        assert bool((m.sum(-1) >= 1).all())


def test_masked_attention_examples(rng):
    q, k, v = (rng.tensor_normal((2, 2, 5, 4), f64) for _ in range(3))
    ones = torch.ones(5, 5, dtype=f64)
    ref = torch.softmax(q @ k.transpose(-1, -2) / 2.0, -1) @ v
    assert (cmca.masked_attention(q, k, v, ones) - ref).abs().max().item() <= 1e-6
    single = torch.zeros(5, 5, dtype=f64)
    single[:, 3] = 1
    out = cmca.masked_attention(q, k, v, single)
    assert torch.equal(out, v[:, :, 3:4].expand_as(out))
    with pytest.raises(DegenerateRowError):
        cmca.masked_attention(q, k, v, torch.zeros(5, 5, dtype=f64))


def test_masked_attention_hand_weights():
    # d_h = 1, q = 1, keys (0, ln 3): scores (0, ln 3), weights (1/4, 3/4)
    q = torch.ones(1, 1, 2, 1, dtype=f64)
    k = torch.tensor([0.0, math.log(3.0)], dtype=f64).reshape(1, 1, 2, 1)
    v = torch.tensor([1.0, 0.0], dtype=f64).reshape(1, 1, 2, 1)
    out = cmca.masked_attention(q, k, v, torch.ones(2, 2, dtype=f64))
    assert abs(out[0, 0, 0, 0].item() - 0.25) < 1e-15


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_masked_positions_get_zero_weight(dtype, rng):
    q, k = rng.tensor_normal((1, 1, 6, 4), dtype), rng.tensor_normal((1, 1, 6, 4), dtype)
    v = torch.eye(6, dtype=dtype)[None, None]
    mask = cmca.build_mask(cmca.CmcaLayout.canonical(1, 1, 0, 1, 3), dtype)
    w = cmca.masked_attention(q, k, v, mask)[0, 0]
    assert float(w[mask == 0].abs().max()) < 1e-6
    assert torch.allclose(w.sum(-1), torch.ones(6, dtype=dtype), atol=1e-6)


def _block(seed=0, dtype=f64):
    return cmca.CmcaBlock(8, 16, 2, rng=Rng(seed, 3), dtype=dtype)


LAYOUT = cmca.CmcaLayout.canonical(3, 2, 1, 1, 5)


def test_block_is_identity_with_zero_attention_and_ffn(rng):
    blk = _block()
    with torch.no_grad():
        for s in (blk.wl, blk.plan):
            s.wo.zero_()
        blk.wl_w2.zero_()
    zero_ffn = lambda h: torch.zeros_like(h)
    x = rng.tensor_normal((2, LAYOUT.total_len, 8), f64)
    assert torch.equal(blk(x, LAYOUT, plan_ffn=zero_ffn), x)


def test_conditioning_is_blind_to_actions(rng):
    blk = _block()
    x = rng.tensor_normal((2, LAYOUT.total_len, 8), f64)
    base = blk(x, LAYOUT)
    n = len(LAYOUT.cond_indices)
    for j in range(n, LAYOUT.total_len):
        y = x.clone()
        y[:, j] = rng.tensor_normal((2, 8), f64)
        out = blk(y, LAYOUT)
        assert torch.equal(out[:, :j], base[:, :j])
        assert not torch.equal(out[:, j], base[:, j])


@pytest.mark.parametrize("r", [1, 3, 5])
def test_causal_prefix(r, rng):
    blk = _block(1, torch.float32)
    x = rng.tensor_normal((2, LAYOUT.total_len, 8))
    n = len(LAYOUT.cond_indices)
    full = blk(x, LAYOUT)
    short = blk(x[:, :n + r], LAYOUT.truncated(r))
    assert (short - full[:, :n + r]).abs().max().item() <= 1e-6


def test_permuting_conditioning_tokens(rng):
    blk = _block(2)
    x = rng.tensor_normal((1, LAYOUT.total_len, 8), f64)
    y = x.clone()
    y[:, [0, 2]] = x[:, [2, 0]]
    a, b = blk(x, LAYOUT), blk(y, LAYOUT)
    assert torch.allclose(b[:, [2, 0]], a[:, [0, 2]], atol=1e-12)
    assert torch.allclose(b[:, 1], a[:, 1], atol=1e-12)
    assert torch.allclose(b[:, 3:], a[:, 3:], atol=1e-12)


def test_plan_ffn_routes_only_planning_positions(rng):
    blk = _block(3)
    x = rng.tensor_normal((1, LAYOUT.total_len, 8), f64)
    other = MergedFfn(*(rng.tensor_normal(t.shape, f64) for t in (blk.plan_w1, blk.plan_w3, blk.plan_w2)))
    a, b = blk(x, LAYOUT), blk(x, LAYOUT, plan_ffn=other)
    n_wl = LAYOUT.total_len - LAYOUT.plan_len
    assert torch.equal(a[:, :n_wl], b[:, :n_wl])
    assert not torch.allclose(a[:, n_wl:], b[:, n_wl:])
    assert torch.equal(blk(x, LAYOUT, plan_ffn=blk.dense_plan_ffn()), a)


def test_mask_is_deterministic():
    assert torch.equal(cmca.build_mask(LAYOUT), cmca.build_mask(LAYOUT))
