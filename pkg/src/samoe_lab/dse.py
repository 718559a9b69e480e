"""Deformable scene encoder: near-field prior, offset prediction, deformable
convolution, query cross-attention and per-layer routing heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import Rng, init_param, layer_norm, mean_pool, softmax_rows


class ConfigError(ValueError):
    pass


@dataclass
class NearFieldMap:
    grid: torch.Tensor  # [H, W]
    ego_center: tuple[int, int]


@dataclass
class SceneHidden:
    tokens: torch.Tensor  # [B, T, C_r]
    query_count: int
    computed_once: bool = True
    serial: int = 0


def near_field_map(H: int, W: int, ego_center: tuple[int, int], dtype: torch.dtype = torch.float64) -> NearFieldMap:
    """1 at the ego cell, 0 at the farthest cell, linear in Euclidean cell distance."""
    if H < 1 or W < 1:
        raise ConfigError(f"grid must be at least 1x1, got {H}x{W}")
    cx, cy = ego_center
    if not (0 <= cx < H and 0 <= cy < W):
        raise ConfigError(f"ego center {ego_center} outside {H}x{W} grid")
    ii = torch.arange(H, dtype=torch.float64)[:, None]
    jj = torch.arange(W, dtype=torch.float64)[None, :]
    dist = torch.sqrt((ii - cx) ** 2 + (jj - cy) ** 2)
    dmax = float(dist.max())
    if dmax == 0.0:
        dmax = 1.0
    return NearFieldMap(grid=(1.0 - dist / dmax).to(dtype), ego_center=(cx, cy))


def bilinear_gather(f: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample f [B,C,H,W] at fractional (py, px) of shape [B,P]; zero outside the grid. Returns [B,C,P]."""
    B, C, H, W = f.shape
    flat = f.reshape(B, C, H * W)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    out = None
    for dy, wy in ((0, 1.0 - wy1), (1, wy1)):
        for dx, wx in ((0, 1.0 - wx1), (1, wx1)):
            yi = y0 + dy
            xi = x0 + dx
            valid = (yi >= 0) & (yi <= H - 1) & (xi >= 0) & (xi <= W - 1)
            idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).long()
            vals = torch.gather(flat, 2, idx[:, None, :].expand(B, C, idx.shape[1]))
            term = vals * (wy * wx * valid.to(f.dtype))[:, None, :]
            out = term if out is None else out + term
    return out


def deformable_conv(f: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                    bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-1 'same' deformable convolution.

    offsets: [B, 2K*K, H, W], channel 2k is the row shift and 2k+1 the column
    shift of tap k = ki*K + kj, in cell units. weight: [C_out, C_in, K, K].
    """
    B, C, H, W = f.shape
    c_out, c_in, K, K2 = weight.shape
    if K != K2 or c_in != C:
        raise ConfigError(f"weight {tuple(weight.shape)} incompatible with input channels {C}")
    if offsets.shape != (B, 2 * K * K, H, W):
        raise ConfigError(f"offsets shape {tuple(offsets.shape)} != {(B, 2 * K * K, H, W)}")
    r = K // 2
    base_i = torch.arange(H, dtype=f.dtype)[:, None].expand(H, W)
    base_j = torch.arange(W, dtype=f.dtype)[None, :].expand(H, W)
    taps = []
    for k in range(K * K):
        ki, kj = divmod(k, K)
        py = (base_i + (ki - r))[None] + offsets[:, 2 * k]
        px = (base_j + (kj - r))[None] + offsets[:, 2 * k + 1]
        taps.append(bilinear_gather(f, py.reshape(B, -1), px.reshape(B, -1)))
    sampled = torch.stack(taps, dim=2)  # [B, C, K*K, H*W]
    out = torch.einsum("bckp,ock->bop", sampled, weight.reshape(c_out, C, K * K))
    if bias is not None:
        out = out + bias[None, :, None]
    return out.reshape(B, c_out, H, W)


def scene_tokens(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None) -> torch.Tensor:
    """[B,C,H,W] -> [B,H*W,C], token h*W+w, each token layer-normalised."""
    B, C, H, W = x.shape
    return layer_norm(x.reshape(B, C, H * W).transpose(1, 2), gain, bias)


def multihead_cross_attention(q_in: torch.Tensor, kv: torch.Tensor, wq, bq, wk, bk, wv, bv, wo, bo,
                              heads: int) -> torch.Tensor:
    """q_in [Bq,T,C] (Bq may be 1 and is broadcast), kv [B,N,C] -> [B,T,C]."""
    B, N, C = kv.shape
    if C % heads:
        raise ConfigError(f"{heads} heads do not divide width {C}")
    dh = C // heads
    q = (q_in @ wq + bq).expand(B, -1, -1)
    k = kv @ wk + bk
    v = kv @ wv + bv
    T = q.shape[1]
    q = q.reshape(B, T, heads, dh).transpose(1, 2)
    k = k.reshape(B, N, heads, dh).transpose(1, 2)
    v = v.reshape(B, N, heads, dh).transpose(1, 2)
    att = softmax_rows(q @ k.transpose(-1, -2) / math.sqrt(dh))
    o = (att @ v).transpose(1, 2).reshape(B, T, C)
    return o @ wo + bo


class DeformableSceneEncoder(nn.Module):
    """BEV grid -> SceneHidden, plus one routing head per SA-MoE layer.

    ``computations`` counts scene_hidden evaluations so callers can assert the
    encoder ran once per planner forward.
    """

    def __init__(self, in_channels: int, grid_hw: tuple[int, int], ego_center: tuple[int, int],
                 moe_layers: Sequence[int], experts: int, hidden: int = 32, queries: int = 4,
                 heads: int = 4, kernel: int = 3, rng: Rng | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        if hidden % heads:
            raise ConfigError(f"{heads} heads do not divide routing width {hidden}")
        rng = rng or Rng(0, 11)
        self.heads = heads
        self.kernel = kernel
        self.ego_center = tuple(ego_center)
        self.moe_layers = list(moe_layers)
        self.computations = 0
        H, W = grid_hw
        self.register_buffer("near", near_field_map(H, W, ego_center, dtype=dtype).grid)
        # offset predictor starts at exactly zero
        self.offset_w = init_param(rng, (2 * kernel * kernel, in_channels + 1, 3, 3), 0.0, dtype)
        self.offset_b = init_param(rng, (2 * kernel * kernel,), 0.0, dtype)
        self.conv_w = init_param(rng, (hidden, in_channels, kernel, kernel),
                                 1.0 / math.sqrt(in_channels * kernel * kernel), dtype)
        self.conv_b = init_param(rng, (hidden,), 0.0, dtype)
        self.norm_g = nn.Parameter(torch.ones(hidden, dtype=dtype))
        self.norm_b = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.queries = init_param(rng, (1, queries, hidden), 1.0, dtype)
        s = 1.0 / math.sqrt(hidden)
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", init_param(rng, (hidden, hidden), s, dtype))
            setattr(self, f"b{name}", init_param(rng, (hidden,), 0.0, dtype))
        self.route_w = nn.ParameterDict({str(i): init_param(rng, (hidden, experts), s, dtype) for i in self.moe_layers})
        self.route_b = nn.ParameterDict({str(i): init_param(rng, (experts,), 0.0, dtype) for i in self.moe_layers})

    def predict_offsets(self, f: torch.Tensor) -> torch.Tensor:
        B = f.shape[0]
        prior = self.near.to(f.dtype).expand(B, 1, *self.near.shape)
        return F.conv2d(torch.cat([f, prior], dim=1), self.offset_w, self.offset_b, padding=1)

    def encode_tokens(self, f: torch.Tensor) -> torch.Tensor:
        offsets = self.predict_offsets(f)
        x = deformable_conv(f, offsets, self.conv_w, self.conv_b)
        return scene_tokens(x, self.norm_g, self.norm_b)

    def forward(self, f: torch.Tensor) -> SceneHidden:
        s = self.encode_tokens(f)
        h = multihead_cross_attention(self.queries, s, self.wq, self.bq, self.wk, self.bk,
                                      self.wv, self.bv, self.wo, self.bo, self.heads)
        self.computations += 1
        return SceneHidden(tokens=h, query_count=h.shape[1], serial=self.computations)

    def routing_weights(self, hidden: SceneHidden, layer: int) -> torch.Tensor:
        return routing_weights(hidden, self.route_w[str(layer)], self.route_b[str(layer)])


def routing_weights(hidden: SceneHidden, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Mean-pool over queries, affine map to E logits, row softmax -> [B, E]."""
    return softmax_rows(mean_pool(hidden.tokens, 1) @ weight + bias)
