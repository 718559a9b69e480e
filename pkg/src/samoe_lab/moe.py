"""Expert banks, scene-level weight merging, and token-level MoE baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .numerics import Rng, init_param, silu, softmax_rows


class SimplexError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class ExpertBank(nn.Module):
    """E gated FFN experts stored as stacked tensors w1, w3: [E,d,m] and w2: [E,m,d]."""

    def __init__(self, experts: int, d: int, m: int, rng: Rng | None = None,
                 dtype: torch.dtype = torch.float32, scale: float | None = None):
        super().__init__()
        if experts < 1:
            raise ValueError("an expert bank needs at least one expert")
        rng = rng or Rng(0, 21)
        s_in = 1.0 / math.sqrt(d) if scale is None else scale
        s_hid = 1.0 / math.sqrt(m) if scale is None else scale
        self.w1 = init_param(rng, (experts, d, m), s_in, dtype)
        self.w3 = init_param(rng, (experts, d, m), s_in, dtype)
        self.w2 = init_param(rng, (experts, m, d), s_hid, dtype)

    @property
    def experts(self) -> int:
        return self.w1.shape[0]

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def m(self) -> int:
        return self.w1.shape[2]

    @classmethod
    def from_dense(cls, w1: torch.Tensor, w3: torch.Tensor, w2: torch.Tensor, experts: int,
                   jitter: float = 0.0, rng: Rng | None = None) -> "ExpertBank":
        """Every expert is an exact copy of the dense FFN, optionally plus N(0, jitter^2) noise."""
        bank = cls(experts, w1.shape[0], w1.shape[1], dtype=w1.dtype, scale=0.0)
        with torch.no_grad():
            for mine, src in ((bank.w1, w1), (bank.w3, w3), (bank.w2, w2)):
                mine.copy_(src.detach().expand_as(mine))
                if jitter > 0.0:
                    mine.add_(rng.tensor_normal(mine.shape, dtype=mine.dtype, scale=jitter))
        return bank

    def expert(self, e: int) -> "MergedFfn":
        return MergedFfn(self.w1[e], self.w3[e], self.w2[e], provenance=(id(self), None))

    def flat(self) -> torch.Tensor:
        """[E, P] with each row the concatenated (w1, w2, w3) of one expert."""
        E = self.experts
        return torch.cat([self.w1.reshape(E, -1), self.w2.reshape(E, -1), self.w3.reshape(E, -1)], dim=1)


@dataclass
class MergedFfn:
    """Merged (or single-expert) weights; leading batch dim optional ([B,d,m] per-sample)."""

    w1: torch.Tensor
    w3: torch.Tensor
    w2: torch.Tensor
    provenance: tuple = field(default=(None, None))


def check_simplex(pi: torch.Tensor) -> None:
    tol = 1e-6 if pi.dtype == torch.float32 else 1e-10
    if bool((pi < -tol).any()):
        raise SimplexError(f"mixture weights contain negative entries (min {float(pi.detach().min()):.3g})")
    dev = (pi.sum(dim=-1) - 1.0).abs().max()
    if float(dev.detach()) > tol:
        raise SimplexError(f"mixture weights do not sum to 1 (max deviation {float(dev):.3g})")


def merge_experts(bank: ExpertBank, pi: torch.Tensor) -> MergedFfn:
    """Convex combination of expert matrices. pi: [E] or [B, E] (one merged FFN per sample)."""
    if pi.shape[-1] != bank.experts:
        raise SimplexError(f"pi has {pi.shape[-1]} entries for {bank.experts} experts")
    check_simplex(pi)
    # W_r + sum_{e != r} pi_e (W_e - W_r) with r = argmax pi and pi renormalised, written with the
    # differences D_e = W_e - W_0 so they are formed once: one-hot pi (all coefficients zero) and
    # identical experts (all D zero) both reproduce the stored weights bit for bit
    pi = pi.to(bank.w1.dtype)
    E = bank.experts
    rows_pi = (pi / pi.sum(dim=-1, keepdim=True)).reshape(-1, E)
    ref = rows_pi.detach().argmax(dim=-1)
    is_ref = torch.zeros_like(rows_pi).scatter(-1, ref[:, None], 1.0)
    others = rows_pi * (1.0 - is_ref)
    coef = others - is_ref * others.sum(dim=-1, keepdim=True)

    def merge(w: torch.Tensor) -> torch.Tensor:
        flat = w.reshape(E, -1)
        out = flat[ref] + coef[:, 1:] @ (flat[1:] - flat[:1])
        return out.reshape(*pi.shape[:-1], *w.shape[1:])

    return MergedFfn(merge(bank.w1), merge(bank.w3), merge(bank.w2), provenance=(id(bank), pi.detach().clone()))


def swiglu_forward(h: torch.Tensor, f: MergedFfn) -> torch.Tensor:
    """silu(h W1) * (h W3) @ W2, token-wise; per-sample weights broadcast over the token axis."""
    return (silu(h @ f.w1) * (h @ f.w3)) @ f.w2


def ideal_mixture_output(bank: ExpertBank, pi: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Output-space mixture sum_e pi_e F_e(x), pi of shape [E]."""
    out = torch.zeros_like(x)
    for e in range(bank.experts):
        out = out + pi[e] * swiglu_forward(x, bank.expert(e))
    return out


def merging_residual(bank: ExpertBank, pi: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """L2 norm of F_{W(pi)}(x) - sum_e pi_e F_{W_e}(x)."""
    gap = swiglu_forward(x, merge_experts(bank, pi)) - ideal_mixture_output(bank, pi, x)
    return torch.linalg.vector_norm(gap)


def pairwise_dispersion(bank: ExpertBank, pi: torch.Tensor) -> torch.Tensor:
    """sum over ordered pairs e != e' of pi_e pi_e' ||W_e - W_e'||_F^2."""
    theta = bank.flat().to(pi.dtype)
    # explicit differences: the |a|^2 + |b|^2 - 2ab shortcut cancels badly for near-identical experts
    d2 = ((theta[:, None, :] - theta[None, :, :]) ** 2).sum(dim=-1)
    return pi @ d2 @ pi


# ---------------------------------------------------------------------------
# token-level baselines


def topk_lowest_index(probs: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries on the last axis; ties go to the lower index."""
    return torch.argsort(-probs, dim=-1, stable=True)[..., :k]


def topk_gates(probs: torch.Tensor, k: int) -> torch.Tensor:
    """Dense [.., E] gate with the top-k probabilities renormalised and zeros elsewhere."""
    idx = topk_lowest_index(probs, k)
    keep = torch.zeros_like(probs).scatter(-1, idx, 1.0)
    kept = probs * keep
    return kept / kept.sum(dim=-1, keepdim=True)


def dispatch_experts(bank: ExpertBank, x: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
    """Route each token only to experts with nonzero gate, gather the weighted outputs."""
    B, L, d = x.shape
    flat = x.reshape(B * L, d)
    g = gates.reshape(B * L, -1)
    out = torch.zeros_like(flat)
    for e in range(bank.experts):
        rows = torch.nonzero(g[:, e] > 0, as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        y = swiglu_forward(flat[rows], bank.expert(e))
        out = out.index_add(0, rows, y * g[rows, e:e + 1])
    return out.reshape(B, L, d)


def sparse_moe_forward(bank: ExpertBank, router_w: torch.Tensor, x: torch.Tensor, k: int,
                       router_b: torch.Tensor | None = None) -> torch.Tensor:
    if not 1 <= k <= bank.experts:
        raise ValueError(f"k={k} outside [1, {bank.experts}]")
    logits = x @ router_w
    if router_b is not None:
        logits = logits + router_b
    return dispatch_experts(bank, x, topk_gates(softmax_rows(logits), k))


def sparse_moe_bev_bias_forward(bank: ExpertBank, x: torch.Tensor, h_bev: torch.Tensor, w_tok: torch.Tensor,
                                w_bev: torch.Tensor, omega_tok: float, omega_bev: float, k: int) -> torch.Tensor:
    """Top-k gating on omega_tok * x W_tok + omega_bev * h_bev W_bev; h_bev: [B, d_bev]."""
    if not 1 <= k <= bank.experts:
        raise ValueError(f"k={k} outside [1, {bank.experts}]")
    logits = omega_tok * (x @ w_tok) + omega_bev * (h_bev @ w_bev)[:, None, :]
    return dispatch_experts(bank, x, topk_gates(softmax_rows(logits), k))


def _slot_mixture(bank: ExpertBank, x: torch.Tensor, logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """logits [B,L,E,S] -> (output [B,L,d], per-token expert weights [B,L,E])."""
    B, L, E, S = logits.shape
    dispatch = softmax_rows(logits.permute(0, 2, 3, 1))  # over tokens, [B,E,S,L]
    slot_in = dispatch @ x[:, None]  # [B,E,S,d]
    slot_out = torch.stack([swiglu_forward(slot_in[:, e], bank.expert(e)) for e in range(E)], dim=1)
    combine = softmax_rows(logits.reshape(B, L, E * S)).reshape(B, L, E, S)
    out = torch.einsum("bles,besd->bld", combine, slot_out)
    return out, combine.sum(dim=-1)


def soft_moe_forward(bank: ExpertBank, slots: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if slots.shape[1] < 1:
        raise ValueError("need at least one slot per expert")
    logits = torch.einsum("bld,esd->bles", x, slots)
    return _slot_mixture(bank, x, logits)[0]


def soft_moe_bev_bias_forward(bank: ExpertBank, slots: torch.Tensor, x: torch.Tensor, h_bev: torch.Tensor,
                              alpha: torch.Tensor, omega_slot: float, omega_bev: float) -> torch.Tensor:
    """Slot logits <x,S> * omega_slot + (<h_bev,S> * alpha_e) * omega_bev; h_bev: [B, d]."""
    tok = torch.einsum("bld,esd->bles", x, slots)
    bev = torch.einsum("bd,esd->bes", h_bev, slots) * alpha[None, :, None]
    return _slot_mixture(bank, x, tok * omega_slot + bev[:, None] * omega_bev)[0]


def soft_token_weights(bank: ExpertBank, slots: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Per-token effective expert weights of the slot mixture (combine weights summed over slots)."""
    logits = torch.einsum("bld,esd->bles", x, slots)
    return _slot_mixture(bank, x, logits)[1]


def parameter_dispersion(bank: ExpertBank, pi_samples: torch.Tensor) -> torch.Tensor:
    """Mean squared distance of realised merged parameters sum_e pi_e theta_e from their mean."""
    if pi_samples.dim() != 2 or pi_samples.shape[0] < 2:
        raise InsufficientDataError("parameter_dispersion needs at least two mixture-weight samples")
    theta = bank.flat().detach().to(pi_samples.dtype)
    centered = pi_samples - pi_samples.mean(dim=0, keepdim=True)
    diffs = centered @ theta
    return (diffs * diffs).sum(dim=1).mean()
