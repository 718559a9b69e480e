"""Conditional cross-modal causal attention: structured mask, masked attention,
and the two-expert transformer block."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .moe import MergedFfn, swiglu_forward
from .numerics import MASK_SENTINEL, DegenerateRowError, Rng, init_param, layer_norm, softmax_rows


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class CmcaLayout:
    total_len: int
    cond_indices: tuple[int, ...]
    action_indices: tuple[int, ...]
    plan_len: int

    def __post_init__(self):
        c, a = set(self.cond_indices), set(self.action_indices)
        if c & a:
            raise LayoutError(f"conditioning and action sets overlap at {sorted(c & a)}")
        if c | a != set(range(self.total_len)) or len(c) + len(a) != self.total_len:
            raise LayoutError("conditioning and action sets must partition 0..L-1")
        if list(self.action_indices) != sorted(self.action_indices):
            raise LayoutError("action indices must be strictly increasing")
        if not 0 <= self.plan_len <= self.total_len:
            raise LayoutError(f"plan_len {self.plan_len} outside [0, {self.total_len}]")

    @classmethod
    def canonical(cls, bev: int, world: int, language: int, state: int, actions: int) -> "CmcaLayout":
        """[bev | world | language | ego-state | actions]; planning stream = ego-state + actions."""
        n_cond = bev + world + language + state
        return cls(total_len=n_cond + actions, cond_indices=tuple(range(n_cond)),
                   action_indices=tuple(range(n_cond, n_cond + actions)), plan_len=state + actions)

    def truncated(self, r: int) -> "CmcaLayout":
        """Same layout keeping only the first r action tokens (canonical layouts only)."""
        keep = self.action_indices[:r]
        return CmcaLayout(total_len=len(self.cond_indices) + r, cond_indices=self.cond_indices,
                          action_indices=keep, plan_len=self.plan_len - (len(self.action_indices) - r))


def build_mask(layout: CmcaLayout, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """A[i,j] = 1 iff j is conditioning, or both are actions with j <= i."""
    L = layout.total_len
    is_cond = torch.zeros(L, dtype=torch.bool)
    is_act = torch.zeros(L, dtype=torch.bool)
    is_cond[list(layout.cond_indices)] = True
    is_act[list(layout.action_indices)] = True
    idx = torch.arange(L)
    causal = idx[None, :] <= idx[:, None]
    mask = is_cond[None, :] | (is_act[:, None] & is_act[None, :] & causal)
    return mask.to(dtype)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor,
                     m_const: float = MASK_SENTINEL) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_h) + (1 - A)(-M)) v over [B, heads, L, d_h]."""
    if bool((mask.sum(dim=-1) == 0).any()):
        raise DegenerateRowError("attention mask has a row with no visible position")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return softmax_rows(scores + (1.0 - mask.to(scores.dtype)) * (-m_const)) @ v


class _StreamParams(nn.Module):
    """Pre-norms and attention projections for one functional expert."""

    def __init__(self, d: int, rng: Rng, dtype: torch.dtype):
        super().__init__()
        s = 1.0 / math.sqrt(d)
        self.ln1_g = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.ln2_g = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.wq = init_param(rng, (d, d), s, dtype)
        self.wk = init_param(rng, (d, d), s, dtype)
        self.wv = init_param(rng, (d, d), s, dtype)
        self.wo = init_param(rng, (d, d), s, dtype)


class CmcaBlock(nn.Module):
    """Pre-norm block with disjoint world-language and planning parameter sets.

    The planning stream is the last ``layout.plan_len`` positions. Its FFN is the
    block's own dense SwiGLU unless ``plan_ffn`` is supplied (merged SA-MoE
    weights, or any token-wise callable such as a sparse MoE).
    """

    def __init__(self, d: int, m: int, heads: int, rng: Rng | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        if d % heads:
            raise LayoutError(f"{heads} heads do not divide width {d}")
        rng = rng or Rng(0, 31)
        self.heads = heads
        self.wl = _StreamParams(d, rng, dtype)
        self.plan = _StreamParams(d, rng, dtype)
        s_in, s_hid = 1.0 / math.sqrt(d), 1.0 / math.sqrt(m)
        self.wl_w1 = init_param(rng, (d, m), s_in, dtype)
        self.wl_w3 = init_param(rng, (d, m), s_in, dtype)
        self.wl_w2 = init_param(rng, (m, d), s_hid, dtype)
        self.plan_w1 = init_param(rng, (d, m), s_in, dtype)
        self.plan_w3 = init_param(rng, (d, m), s_in, dtype)
        self.plan_w2 = init_param(rng, (m, d), s_hid, dtype)

    def dense_plan_ffn(self) -> MergedFfn:
        return MergedFfn(self.plan_w1, self.plan_w3, self.plan_w2)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, layout: CmcaLayout, mask: torch.Tensor | None = None,
                plan_ffn: MergedFfn | Callable[[torch.Tensor], torch.Tensor] | None = None) -> torch.Tensor:
        B, L, d = x.shape
        if L != layout.total_len:
            raise LayoutError(f"sequence length {L} != layout length {layout.total_len}")
        n_wl = L - layout.plan_len
        if mask is None:
            mask = build_mask(layout, x.dtype)
        x_wl, x_p = x[:, :n_wl], x[:, n_wl:]
        h_wl = layer_norm(x_wl, self.wl.ln1_g, self.wl.ln1_b)
        h_p = layer_norm(x_p, self.plan.ln1_g, self.plan.ln1_b)
        # values of both experts are concatenated in token order
        q = torch.cat([h_wl @ self.wl.wq, h_p @ self.plan.wq], dim=1)
        k = torch.cat([h_wl @ self.wl.wk, h_p @ self.plan.wk], dim=1)
        v = torch.cat([h_wl @ self.wl.wv, h_p @ self.plan.wv], dim=1)
        o = masked_attention(self._split_heads(q), self._split_heads(k), self._split_heads(v), mask)
        o = o.transpose(1, 2).reshape(B, L, d)
        r_wl = x_wl + o[:, :n_wl] @ self.wl.wo
        r_p = x_p + o[:, n_wl:] @ self.plan.wo
        f_wl = swiglu_forward(layer_norm(r_wl, self.wl.ln2_g, self.wl.ln2_b),
                              MergedFfn(self.wl_w1, self.wl_w3, self.wl_w2))
        hp = layer_norm(r_p, self.plan.ln2_g, self.plan.ln2_b)
        if plan_ffn is None:
            f_p = swiglu_forward(hp, self.dense_plan_ffn())
        elif isinstance(plan_ffn, MergedFfn):
            f_p = swiglu_forward(hp, plan_ffn)
        else:
            f_p = plan_ffn(hp)
        return torch.cat([r_wl + f_wl, r_p + f_p], dim=1)


def sinusoidal_positions(n: int, d: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(d // 2, dtype=torch.float64)[None, :]
    ang = pos / (10000.0 ** (2.0 * i / d))
    out = torch.zeros(n, d, dtype=torch.float64)
    out[:, 0::2] = torch.sin(ang)
    out[:, 1::2] = torch.cos(ang)
    return out.to(dtype)

