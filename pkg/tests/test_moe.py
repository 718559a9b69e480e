import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from samoe_lab import moe
from samoe_lab.numerics import Rng, silu

f64 = torch.float64


def _bank(seed, E=3, d=4, m=6, dtype=f64):
    return moe.ExpertBank(E, d, m, rng=Rng(seed, 5), dtype=dtype)


def _scalar_bank(values, w=None):
    """d = m = 1 bank whose w1 entries are ``values`` (w2, w3 set to ``w`` or 1)."""
    E = len(values)
    bank = moe.ExpertBank(E, 1, 1, dtype=f64, scale=0.0)
    with torch.no_grad():
        bank.w1.copy_(torch.tensor(values, dtype=f64).reshape(E, 1, 1))
        bank.w2.fill_(1.0 if w is None else w)
        bank.w3.fill_(1.0 if w is None else w)
    return bank


def _simplex(seed, E):
    return torch.from_numpy(Rng(seed, 6).dirichlet(np.ones(E)))


def test_one_hot_merge_is_bit_exact():
    bank = _bank(0)
    for k in range(3):
        f = moe.merge_experts(bank, torch.eye(3, dtype=f64)[k])
        for a, b in ((f.w1, bank.w1[k]), (f.w2, bank.w2[k]), (f.w3, bank.w3[k])):
            assert torch.equal(a, b)


@given(st.integers(0, 10_000))
def test_identical_experts_merge_back_exactly(seed):
    src = _bank(seed, E=1)
    bank = moe.ExpertBank.from_dense(src.w1[0], src.w3[0], src.w2[0], 4)
    f = moe.merge_experts(bank, _simplex(seed, 4))
    assert torch.equal(f.w1, src.w1[0]) and torch.equal(f.w2, src.w2[0]) and torch.equal(f.w3, src.w3[0])


def test_scalar_weighted_mean():
    f = moe.merge_experts(_scalar_bank([0.0, 4.0]), torch.tensor([0.25, 0.75], dtype=f64))
    assert f.w1.item() == 3.0


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_merge_is_linear_in_pi(seed, alpha):
    bank = _bank(seed)
    p, q = _simplex(seed, 3), _simplex(seed + 1, 3)
    lhs = moe.merge_experts(bank, alpha * p + (1 - alpha) * q)
    a, b = moe.merge_experts(bank, p), moe.merge_experts(bank, q)
    for x, y, z in ((lhs.w1, a.w1, b.w1), (lhs.w2, a.w2, b.w2), (lhs.w3, a.w3, b.w3)):
        assert (x - (alpha * y + (1 - alpha) * z)).abs().max().item() <= 1e-12


def test_merge_matches_direct_summation():
    bank, pi = _bank(3, E=5), _simplex(3, 5)
    f = moe.merge_experts(bank, pi)
    assert torch.allclose(f.w1, torch.einsum("e,edm->dm", pi, bank.w1), atol=1e-14)
    batched = moe.merge_experts(bank, torch.stack([pi, torch.eye(5, dtype=f64)[2]]))
    assert batched.w2.shape == (2, 6, 4) and torch.equal(batched.w2[1], bank.w2[2])


def test_merge_is_differentiable():
    bank = _bank(4)
    logits = torch.zeros(3, dtype=f64, requires_grad=True)
    out = moe.swiglu_forward(torch.ones(2, 4, dtype=f64), moe.merge_experts(bank, torch.softmax(logits, 0)))
    g_pi, g_w = torch.autograd.grad(out.sum(), [logits, bank.w1])
    assert g_pi.abs().sum() > 0 and g_w.abs().sum() > 0


@pytest.mark.parametrize("pi", [[0.5, 0.6, -0.1], [0.2, 0.2, 0.2], [1.0, 0.0]])
def test_simplex_violations(pi):
    with pytest.raises(moe.SimplexError):
        moe.merge_experts(_bank(0), torch.tensor(pi, dtype=f64))


def test_swiglu_examples():
    f = _scalar_bank([1.0]).expert(0)
    assert moe.swiglu_forward(torch.zeros(3, 1, dtype=f64), f).abs().max().item() == 0.0
    assert abs(moe.swiglu_forward(torch.ones(1, 1, dtype=f64), f).item() - 0.7310585786300049) < 1e-15
    bank = _bank(1)
    x = Rng(1, 1).tensor_normal((5, 4), f64)
    g = bank.expert(0)
    scaled = moe.MergedFfn(g.w1, g.w3, 4.0 * g.w2)
    assert torch.equal(moe.swiglu_forward(x, scaled), 4.0 * moe.swiglu_forward(x, g))


def test_ideal_mixture_and_residual():
    bank, x = _bank(2), Rng(2, 1).tensor_normal((7, 4), f64)
    onehot = torch.tensor([0.0, 1.0, 0.0], dtype=f64)
    assert torch.equal(moe.ideal_mixture_output(bank, onehot, x), moe.swiglu_forward(x, bank.expert(1)))
    assert moe.merging_residual(bank, onehot, x).item() <= 1e-12
    same = moe.ExpertBank.from_dense(bank.w1[0], bank.w3[0], bank.w2[0], 3)
    assert moe.merging_residual(same, _simplex(2, 3), x).item() <= 1e-12
    assert moe.merging_residual(bank, _simplex(2, 3), x).item() > 0


def test_two_expert_scalar_mixture_by_hand():
    bank = _scalar_bank([0.0, 2.0])
    pi = torch.tensor([0.5, 0.5], dtype=f64)
    x = torch.ones(1, 1, dtype=f64)
    # experts give silu(0) = 0 and silu(2) = 2 sigmoid(2); the merged expert gives silu(1)
    sig2 = 1.0 / (1.0 + np.exp(-2.0))
    assert abs(moe.ideal_mixture_output(bank, pi, x).item() - sig2) < 1e-15
    assert abs(moe.merging_residual(bank, pi, x).item() - abs(0.7310585786300049 - sig2)) < 1e-15


def test_linear_ffn_merge_equals_output_mixture():
    # with identity activation and one matrix, merging parameters is exact
    rng = Rng(5, 1)
    W = rng.tensor_normal((4, 3, 3), f64)
    pi, x = _simplex(5, 4), rng.tensor_normal((6, 3), f64)
    merged = x @ torch.einsum("e,eij->ij", pi, W)
    mixed = sum(pi[e] * (x @ W[e]) for e in range(4))
    assert (merged - mixed).abs().max().item() <= 1e-12


def test_sparse_full_k_equals_soft_output_mixture():
    bank = _bank(6, E=3, dtype=torch.float32)
    rng = Rng(6, 1)
    x, router = rng.tensor_normal((2, 5, 4)), rng.tensor_normal((4, 3))
    out = moe.sparse_moe_forward(bank, router, x, k=3)
    probs = torch.softmax(x @ router, -1)
    ref = sum(probs[..., e:e + 1] * moe.swiglu_forward(x, bank.expert(e)) for e in range(3))
    assert (out - ref).abs().max().item() <= 1e-6


def test_sparse_strong_gate_and_ties():
    bank = _bank(7, E=2)
    x = Rng(7, 1).tensor_normal((1, 4, 4), f64)
    router = torch.zeros(4, 2, dtype=f64)
    out = moe.sparse_moe_forward(bank, router, x, 1, router_b=torch.tensor([10.0, -10.0], dtype=f64))
    assert torch.equal(out, moe.swiglu_forward(x, bank.expert(0)))
    # equal logits: the lower index wins
    tie = moe.sparse_moe_forward(bank, router, x, 1)
    assert torch.equal(tie, moe.swiglu_forward(x, bank.expert(0)))
    assert moe.topk_lowest_index(torch.tensor([0.2, 0.4, 0.4]), 1).item() == 1
    with pytest.raises(ValueError):
        moe.sparse_moe_forward(bank, router, x, 3)


def test_soft_moe_examples():
    bank = _bank(8, E=1)
    x = Rng(8, 1).tensor_normal((1, 1, 4), f64)
    slots = Rng(8, 2).tensor_normal((1, 1, 4), f64)
    assert torch.allclose(moe.soft_moe_forward(bank, slots, x), moe.swiglu_forward(x, bank.expert(0)), atol=1e-15)
    same = x.expand(1, 5, 4)
    w = moe.soft_token_weights(_bank(8, E=3), Rng(8, 3).tensor_normal((3, 2, 4), f64), same)
    assert torch.allclose(w.sum(-1), torch.ones(1, 5, dtype=f64), atol=1e-15)


def test_soft_moe_two_token_hand_case():
    bank = _scalar_bank([1.0])
    x = torch.tensor([[[1.0], [2.0]]], dtype=f64)
    out = moe.soft_moe_forward(bank, torch.ones(1, 1, 1, dtype=f64), x)
    # dispatch softmax(1, 2) gives slot input 1.7310585786300049 and one slot gets all combine weight;
    # expert output silu(s) * s, evaluated to 30 digits
    assert torch.allclose(out, torch.full((1, 2, 1), 2.545724108147721, dtype=f64), atol=1e-14)


def test_soft_bev_bias_degenerate_coefficients():
    bank = _bank(9, E=3)
    rng = Rng(9, 1)
    x, slots = rng.tensor_normal((2, 5, 4), f64), rng.tensor_normal((3, 2, 4), f64)
    h_bev, alpha = rng.tensor_normal((2, 4), f64), rng.tensor_normal((3,), f64)
    plain = moe.soft_moe_forward(bank, slots, x)
    assert torch.allclose(moe.soft_moe_bev_bias_forward(bank, slots, x, h_bev, alpha, 1.0, 0.0), plain, atol=1e-15)
    assert torch.allclose(moe.soft_moe_bev_bias_forward(bank, slots, x, h_bev, torch.zeros(3, dtype=f64), 1.0, 3.0),
                          plain, atol=1e-15)
    # without the token term, every token sees the same logits
    only_bev = moe.soft_moe_bev_bias_forward(bank, slots, x, h_bev, alpha, 0.0, 1.0)
    logits = torch.einsum("bd,esd->bes", h_bev, slots) * alpha[None, :, None]
    comb = torch.softmax(logits.reshape(2, 6), -1).reshape(2, 3, 2)
    slot_in = x.mean(1)
    ref = sum(comb[:, e, s, None] * moe.swiglu_forward(slot_in, bank.expert(e)) for e in range(3) for s in range(2))
    assert torch.allclose(only_bev, ref[:, None].expand(2, 5, 4), atol=1e-12)


def test_sparse_bev_bias_degenerate_coefficients():
    bank = _bank(10, E=3)
    rng = Rng(10, 1)
    x, h_bev = rng.tensor_normal((2, 5, 4), f64), rng.tensor_normal((2, 6), f64)
    w_tok, w_bev = rng.tensor_normal((4, 3), f64), rng.tensor_normal((6, 3), f64)
    plain = moe.sparse_moe_forward(bank, w_tok, x, 2)
    assert torch.equal(moe.sparse_moe_bev_bias_forward(bank, x, h_bev, w_tok, w_bev, 1.0, 0.0, 2), plain)
    assert torch.equal(moe.sparse_moe_bev_bias_forward(bank, x, h_bev, w_tok, torch.zeros(6, 3, dtype=f64),
                                                       1.0, 5.0, 2), plain)
    only_bev = moe.sparse_moe_bev_bias_forward(bank, x, h_bev, w_tok, w_bev, 0.0, 1.0, 2)
    gates = moe.topk_gates(torch.softmax(h_bev @ w_bev, -1), 2)[:, None].expand(2, 5, 3)
    assert torch.allclose(only_bev, moe.dispatch_experts(bank, x, gates), atol=1e-15)


def test_parameter_dispersion_examples():
    bank = _bank(11, E=2)
    eye = torch.eye(2, dtype=f64)
    assert moe.parameter_dispersion(bank, _simplex(1, 2).expand(4, 2)).item() <= 1e-28
    diff = (bank.flat()[0] - bank.flat()[1]).norm().item()
    with torch.no_grad():
        for w in (bank.w1, bank.w2, bank.w3):
            w[1] = w[0] + (w[1] - w[0]) * (2.0 / diff)
    assert abs(moe.parameter_dispersion(bank, eye).item() - 1.0) < 1e-12
    shifted = moe.ExpertBank(2, 4, 6, dtype=f64, scale=0.0)
    with torch.no_grad():
        for mine, src in ((shifted.w1, bank.w1), (shifted.w2, bank.w2), (shifted.w3, bank.w3)):
            mine.copy_(src + 3.7)
    pis = torch.from_numpy(Rng(1, 1).dirichlet(np.ones(2), 9))
    assert abs(moe.parameter_dispersion(shifted, pis).item() - moe.parameter_dispersion(bank, pis).item()) < 1e-10
    with pytest.raises(moe.InsufficientDataError):
        moe.parameter_dispersion(bank, eye[:1])


def test_sparse_two_point_dispersion_closed_form():
    bank = _bank(12, E=2)
    x = Rng(12, 1).tensor_normal((1, 8, 4), f64)
    # the router splits tokens by the sign of their first feature, half each way
    x[0, :4, 0] = x[0, :4, 0].abs() + 0.1
    x[0, 4:, 0] = -x[0, 4:, 0].abs() - 0.1
    router = torch.zeros(4, 2, dtype=f64)
    router[0] = torch.tensor([5.0, -5.0])
    gates = moe.topk_gates(torch.softmax(x @ router, -1), 1).reshape(-1, 2)
    delta = (bank.flat()[0] - bank.flat()[1]).pow(2).sum().item()
    assert abs(moe.parameter_dispersion(bank, gates).item() - delta / 4) < 1e-12


@given(st.integers(0, 10_000), st.integers(2, 8))
def test_dispersion_identity(seed, E):
    bank = moe.ExpertBank(E, 3, 5, rng=Rng(seed, 7), dtype=f64)
    pi = _simplex(seed, E)
    merged = moe.merge_experts(bank, pi)
    theta = bank.flat()
    centre = torch.cat([merged.w1.reshape(-1), merged.w2.reshape(-1), merged.w3.reshape(-1)])
    lhs = (pi * ((theta - centre) ** 2).sum(-1)).sum().item()
    rhs = 0.5 * moe.pairwise_dispersion(bank, pi).item()
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))
