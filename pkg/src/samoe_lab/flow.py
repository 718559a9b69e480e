"""Flow-matching objective and explicit Euler sampling for K x 2 action sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch
from torch import nn

from .numerics import Rng, concat, init_param, silu

K_STEPS = 6
ACTION_DIM = 2
MIN_PERIOD = 4e-3
MAX_PERIOD = 4.0
TAU_LO = 0.001
TAU_HI = 0.999
BETA_ALPHA = 1.5


class IntegrationError(RuntimeError):
    pass


class FlowConfigError(ValueError):
    pass


@dataclass
class FlowSample:
    a: torch.Tensor
    eps: torch.Tensor
    tau: torch.Tensor
    x_tau: torch.Tensor
    u: torch.Tensor


def tau_from_uniform(u):
    """Beta(1.5, 1) by inverse CDF (u^(2/3)), mapped by *0.999 + 0.001, upper end clamped to 0.999."""
    beta = u ** (1.0 / BETA_ALPHA)
    tau = beta * 0.999 + TAU_LO
    if isinstance(tau, torch.Tensor):
        return tau.clamp(max=TAU_HI)
    return min(tau, TAU_HI)


def sample_time(rng: Rng, size: int | None = None, dtype: torch.dtype = torch.float64):
    if size is None:
        return tau_from_uniform(float(rng.uniform()))
    return tau_from_uniform(torch.from_numpy(rng.uniform(size=size)).to(dtype))


def tau_cdf(x):
    """CDF of the sampled time on [0.001, 0.999) (ignores the tiny clamp atom at 0.999)."""
    z = np.clip((np.asarray(x) - TAU_LO) / 0.999, 0.0, 1.0)
    return z ** BETA_ALPHA


def interpolate(a: torch.Tensor, eps: torch.Tensor, tau) -> tuple[torch.Tensor, torch.Tensor]:
    """x_tau = tau * eps + (1 - tau) * a and target velocity u = eps - a."""
    if a.shape != eps.shape:
        raise FlowConfigError(f"action shape {tuple(a.shape)} != noise shape {tuple(eps.shape)}")
    if isinstance(tau, torch.Tensor) and tau.dim() == 1 and a.dim() == 3:
        tau = tau[:, None, None]
    return tau * eps + (1.0 - tau) * a, eps - a


def make_sample(a: torch.Tensor, rng: Rng) -> FlowSample:
    eps = rng.tensor_normal(a.shape, dtype=a.dtype)
    tau = torch.tensor(sample_time(rng), dtype=a.dtype)
    x, u = interpolate(a, eps, tau)
    return FlowSample(a=a, eps=eps, tau=tau, x_tau=x, u=u)


def periods(D: int) -> torch.Tensor:
    if D <= 0 or D % 2:
        raise FlowConfigError(f"time embedding width must be even and positive, got {D}")
    n = D // 2
    if n == 1:
        return torch.tensor([MIN_PERIOD], dtype=torch.float64)
    return MIN_PERIOD * (MAX_PERIOD / MIN_PERIOD) ** (torch.arange(n, dtype=torch.float64) / (n - 1))


def time_embedding(tau, D: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """[sin(2 pi tau / p_i) ..., cos(2 pi tau / p_i) ...]; tau scalar -> [D], tau [B] -> [B, D]."""
    p = periods(D).to(dtype)
    t = torch.as_tensor(tau, dtype=dtype)
    ang = 2.0 * math.pi * t[..., None] / p
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class SuffixEmbedder(nn.Module):
    """Action-time tokens: MLP([psi_act(x_tau) || gamma(tau) 1_K]) with a 2-layer SiLU MLP."""

    def __init__(self, D: int, rng: Rng | None = None, dtype: torch.dtype = torch.float32, zero: bool = False):
        super().__init__()
        rng = rng or Rng(0, 41)
        sc = (lambda s: 0.0 if zero else s)
        self.D = D
        self.act_w = init_param(rng, (ACTION_DIM, D), sc(1.0), dtype)
        self.act_b = init_param(rng, (D,), 0.0, dtype)
        self.mlp_w1 = init_param(rng, (2 * D, D), sc(1.0 / math.sqrt(2 * D)), dtype)
        self.mlp_b1 = init_param(rng, (D,), 0.0, dtype)
        self.mlp_w2 = init_param(rng, (D, D), sc(1.0 / math.sqrt(D)), dtype)
        self.mlp_b2 = init_param(rng, (D,), 0.0, dtype)

    def forward(self, x_tau: torch.Tensor, tau) -> torch.Tensor:
        return build_suffix_tokens(x_tau, tau, self)


def build_suffix_tokens(x_tau: torch.Tensor, tau, p: SuffixEmbedder) -> torch.Tensor:
    """x_tau [..., K, 2], tau scalar or [B] -> [..., K, D]."""
    e_act = x_tau @ p.act_w + p.act_b
    e_time = time_embedding(tau, p.D, dtype=x_tau.dtype)
    e_time = e_time[..., None, :].expand(e_act.shape)
    h = silu(concat([e_act, e_time], axis=-1) @ p.mlp_w1 + p.mlp_b1)
    return h @ p.mlp_w2 + p.mlp_b2


def flow_loss(v_pred: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Mean over steps (and batch) of squared Euclidean velocity error."""
    if v_pred.shape != u.shape:
        raise FlowConfigError(f"prediction shape {tuple(v_pred.shape)} != target shape {tuple(u.shape)}")
    return ((v_pred - u) ** 2).sum(dim=-1).mean()


VelocityFn = Callable[[torch.Tensor, float, Any], torch.Tensor]


def euler_sample(v_fn: VelocityFn, n_steps: int = 10, rng: Rng | None = None, context: Any = None,
                 shape: tuple[int, ...] = (K_STEPS, ACTION_DIM), dtype: torch.dtype = torch.float64,
                 x1: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate dx/dt = v from t=1 (Gaussian noise) to t=0 with N explicit Euler steps."""
    if n_steps < 1:
        raise FlowConfigError("need at least one Euler step")
    if x1 is None:
        if rng is None:
            raise FlowConfigError("either rng or initial noise x1 is required")
        x1 = rng.tensor_normal(shape, dtype=dtype)
    x = x1
    dt = -1.0 / n_steps
    for i in range(n_steps):
        t = 1.0 + i * dt
        v = v_fn(x, t, context)
        if not bool(torch.isfinite(v).all()):
            raise IntegrationError(f"non-finite velocity at Euler step {i} (t={t:.4f})")
        x = x + dt * v
    return x
