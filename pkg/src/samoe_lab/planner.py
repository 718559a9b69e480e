"""Desk-scale planner: context encoder, CMCA stack with SA-MoE layers, flow head,
two-step training, checkpoints and open-loop evaluation."""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import scenes as sc
from .cmca import CmcaBlock, CmcaLayout, build_mask, sinusoidal_positions
from .dse import DeformableSceneEncoder, SceneHidden
from .flow import SuffixEmbedder, euler_sample, flow_loss, interpolate, sample_time
from .moe import ExpertBank, dispatch_experts, merge_experts, topk_gates, topk_lowest_index
from .numerics import (DegenerateRowError, Rng, central_difference, dtype_of, encode_tensor, init_param,
                       load_tensor, relative_error, softmax_rows)

CHECKPOINT_VERSION = 1


class VocabularyError(KeyError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, last_good: "Checkpoint"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass
class PlannerConfig:
    layers: int = 8
    d: int = 64
    m: int = 256
    heads: int = 4
    experts: int = 4
    moe_period: int = 4
    K: int = 6
    d_a: int = 2
    ode_steps: int = 10
    lr: float = 1e-4
    momentum: float = 0.9
    grad_clip: float = 1.0
    batch_size: int = 16
    seed: int = 0
    precision: str = "f32"
    routing_width: int = 32
    queries: int = 4
    routing_heads: int = 4
    kernel: int = 3
    bev_patch: int = 8
    world_tokens: int = 4
    expert_jitter: float = 0.0
    sparse_k: int = 2
    action_scale: float = 10.0
    steps: int = 500
    grid_h: int = 32
    grid_w: int = 32
    bev_channels: int = 16

    @property
    def moe_layers(self) -> list[int]:
        return [i for i in range(self.layers) if (i + 1) % self.moe_period == 0]

    @property
    def dtype(self) -> torch.dtype:
        return dtype_of(self.precision)

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k in known:
                kwargs[k] = type(getattr(cls(), k))(v)
        return cls(**kwargs)


@dataclass
class PlannerBatch:
    grid: torch.Tensor  # [B, C, H, W]
    instructions: torch.Tensor  # [B, n_lang] long
    history: torch.Tensor  # [B, HISTORY_STEPS, 2] normalised
    state: torch.Tensor  # [B, 2]
    actions: torch.Tensor | None = None  # [B, K, 2] normalised

    @property
    def size(self) -> int:
        return self.grid.shape[0]


def make_batch(ds: sc.Dataset, idx: Sequence[int], cfg: PlannerConfig) -> PlannerBatch:
    dt = cfg.dtype
    idx = list(int(i) for i in idx)
    scenes = [ds.scenes[i] for i in idx]
    return PlannerBatch(
        grid=ds.grids[idx].to(dt),
        instructions=torch.tensor([s.instruction_ids() for s in scenes], dtype=torch.long),
        history=torch.from_numpy(np.stack([s.ego_history for s in scenes]) / cfg.action_scale).to(dt),
        state=torch.from_numpy(np.stack([s.ego_state() * np.array([0.1, 10.0]) for s in scenes])).to(dt),
        actions=(ds.actions[idx] / cfg.action_scale).to(dt),
    )


@dataclass
class Prepared:
    """Per-sample quantities that do not depend on the noisy actions."""

    context: torch.Tensor  # [B, n_cond_no_state + state tokens, d]
    plan_ffns: dict = field(default_factory=dict)
    hidden: SceneHidden | None = None
    pis: dict = field(default_factory=dict)


class Planner(nn.Module):
    def __init__(self, cfg: PlannerConfig):
        super().__init__()
        self.cfg = cfg
        dt = cfg.dtype
        rng = Rng(cfg.seed, 101)
        d = cfg.d
        self.mode = "dense"
        self.trace: list | None = None
        self.dse = DeformableSceneEncoder(cfg.bev_channels, (cfg.grid_h, cfg.grid_w),
                                          (cfg.grid_h // 2, cfg.grid_w // 2), cfg.moe_layers, cfg.experts,
                                          hidden=cfg.routing_width, queries=cfg.queries,
                                          heads=cfg.routing_heads, kernel=cfg.kernel, rng=rng.child(1), dtype=dt)
        p = cfg.bev_patch
        if cfg.grid_h % p or cfg.grid_w % p:
            raise ValueError(f"patch {p} does not tile {cfg.grid_h}x{cfg.grid_w}")
        self.n_bev = (cfg.grid_h // p) * (cfg.grid_w // p)
        patch_dim = cfg.bev_channels * p * p
        crng = rng.child(2)
        self.ctx = nn.ParameterDict({
            "bev_w": init_param(crng, (patch_dim, d), 1.0 / math.sqrt(patch_dim), dt),
            "bev_b": init_param(crng, (d,), 0.0, dt),
            "prompts": init_param(crng, (cfg.world_tokens, d), 1.0, dt),
            "lang": init_param(crng, (len(sc.VOCAB), d), 1.0, dt),
            "hist_w": init_param(crng, (sc.HISTORY_STEPS * 2, d), 1.0 / math.sqrt(sc.HISTORY_STEPS * 2), dt),
            "hist_b": init_param(crng, (d,), 0.0, dt),
            "state_w": init_param(crng, (2, d), 1.0 / math.sqrt(2), dt),
            "state_b": init_param(crng, (d,), 0.0, dt),
        })
        self.suffix = SuffixEmbedder(d, rng=rng.child(3), dtype=dt)
        self.register_buffer("action_pos", sinusoidal_positions(cfg.K, d, dt))
        brng = rng.child(4)
        self.blocks = nn.ModuleList([CmcaBlock(d, cfg.m, cfg.heads, rng=brng.child(i), dtype=dt)
                                     for i in range(cfg.layers)])
        orng = rng.child(5)
        self.out_w = init_param(orng, (d, cfg.d_a), 1.0 / math.sqrt(d), dt)
        self.out_b = init_param(orng, (cfg.d_a,), 0.0, dt)
        self.banks = nn.ModuleDict()
        self.routers = nn.ParameterDict()
        self.layout = CmcaLayout.canonical(self.n_bev, cfg.world_tokens, 2, 2, cfg.K)
        self.register_buffer("mask", build_mask(self.layout, dt))

    # -- SA-MoE / sparse conversion ------------------------------------------

    def attach_experts(self, jitter: float | None = None, rng: Rng | None = None) -> None:
        """Clone each MoE layer's dense planning FFN into E sub-experts and switch to SA-MoE."""
        jitter = self.cfg.expert_jitter if jitter is None else jitter
        rng = rng or Rng(self.cfg.seed, 202)
        for i in self.cfg.moe_layers:
            blk = self.blocks[i]
            self.banks[str(i)] = ExpertBank.from_dense(blk.plan_w1, blk.plan_w3, blk.plan_w2, self.cfg.experts,
                                                       jitter=jitter, rng=rng.child(i))
            self.routers[str(i)] = init_param(rng.child(100 + i), (self.cfg.d, self.cfg.experts),
                                              1.0 / math.sqrt(self.cfg.d), self.cfg.dtype)
        self.mode = "samoe"

    # -- forward ----------------------------------------------------------------

    def encode_context(self, batch: PlannerBatch) -> torch.Tensor:
        cfg = self.cfg
        if bool((batch.instructions < 0).any()) or bool((batch.instructions >= len(sc.VOCAB)).any()):
            raise VocabularyError(f"instruction id outside vocabulary of size {len(sc.VOCAB)}")
        g = batch.grid
        B, C, H, W = g.shape
        p = cfg.bev_patch
        patches = g.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5).reshape(B, -1, C * p * p)
        z = patches @ self.ctx["bev_w"] + self.ctx["bev_b"]
        world = z.mean(dim=1, keepdim=True) + self.ctx["prompts"][None]
        lang = self.ctx["lang"][batch.instructions]
        hist = (batch.history.reshape(B, -1) @ self.ctx["hist_w"] + self.ctx["hist_b"])[:, None]
        state = (batch.state @ self.ctx["state_w"] + self.ctx["state_b"])[:, None]
        return torch.cat([z, world, lang, hist, state], dim=1)

    def _sparse_ffn(self, layer: int) -> Callable[[torch.Tensor], torch.Tensor]:
        bank, router, k = self.banks[str(layer)], self.routers[str(layer)], self.cfg.sparse_k

        def ffn(h: torch.Tensor) -> torch.Tensor:
            probs = softmax_rows(h @ router)
            if self.trace is not None:
                self.trace.append(topk_lowest_index(probs, k).sort(dim=-1).values.flatten().tolist())
            return dispatch_experts(bank, h, topk_gates(probs, k))

        return ffn

    def prepare(self, batch: PlannerBatch, pi_override: dict | None = None) -> Prepared:
        ctx = self.encode_context(batch)
        prep = Prepared(context=ctx)
        if self.mode == "samoe":
            if pi_override is None:
                prep.hidden = self.dse(batch.grid)
            for i in self.cfg.moe_layers:
                pi = pi_override[i] if pi_override is not None else self.dse.routing_weights(prep.hidden, i)
                prep.pis[i] = pi
                prep.plan_ffns[i] = merge_experts(self.banks[str(i)], pi)
        elif self.mode == "sparse":
            for i in self.cfg.moe_layers:
                prep.plan_ffns[i] = self._sparse_ffn(i)
        return prep

    def velocity(self, prep: Prepared, x_tau: torch.Tensor, tau) -> torch.Tensor:
        suffix = self.suffix(x_tau, tau) + self.action_pos
        h = torch.cat([prep.context, suffix], dim=1)
        for i, blk in enumerate(self.blocks):
            h = blk(h, self.layout, self.mask, prep.plan_ffns.get(i))
        return h[:, -self.cfg.K:] @ self.out_w + self.out_b

    def forward(self, batch: PlannerBatch, x_tau: torch.Tensor, tau) -> torch.Tensor:
        return self.velocity(self.prepare(batch), x_tau, tau)

    def sample(self, batch: PlannerBatch, noise: torch.Tensor, n_steps: int | None = None,
               pi_override: dict | None = None) -> torch.Tensor:
        """Euler-integrate from the given noise [B,K,2]; returns normalised actions."""
        prep = self.prepare(batch, pi_override)
        tau_vec = lambda t: torch.full((batch.size,), t, dtype=noise.dtype)
        return euler_sample(lambda x, t, _: self.velocity(prep, x, tau_vec(t)),
                            n_steps or self.cfg.ode_steps, x1=noise)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: PlannerConfig
    tensors: dict[str, torch.Tensor]
    step: int
    mode: str
    loss_history: list[float] = field(default_factory=list)


_TOP_LEVEL = {"ctx": "context", "suffix": "flow", "out_w": "flow/out_w", "out_b": "flow/out_b"}


def _ckpt_name(name: str) -> str:
    """Module parameter name -> checkpoint path; bank tensors carry an {e} placeholder."""
    parts = name.split(".")
    if parts[0] == "banks":
        return f"moe/layer{parts[1]}/expert{{e}}/{parts[2]}"
    if parts[0] == "routers":
        return f"moe/layer{parts[1]}/router"
    if parts[0] == "blocks":
        return "/".join([f"cmca/layer{parts[1]}"] + parts[2:])
    return "/".join([_TOP_LEVEL.get(parts[0], parts[0])] + parts[1:])


def model_tensors(model: Planner) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        key = _ckpt_name(name)
        if "{e}" in key:
            for e in range(p.shape[0]):
                out[key.format(e=e)] = p.detach()[e].clone()
        else:
            out[key] = p.detach().clone()
    return out


def load_model_tensors(model: Planner, tensors: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = _ckpt_name(name)
            if "{e}" in key:
                p.copy_(torch.stack([tensors[key.format(e=e)] for e in range(p.shape[0])]))
            else:
                p.copy_(tensors[key])


def make_checkpoint(model: Planner, step: int, loss_history: Sequence[float] = (),
                    optim_state: dict[str, torch.Tensor] | None = None) -> Checkpoint:
    tensors = model_tensors(model)
    for k, v in (optim_state or {}).items():
        tensors[f"optim/{k}"] = v.detach().clone()
    return Checkpoint(config=model.cfg, tensors=tensors, step=step, mode=model.mode,
                      loss_history=list(loss_history))


def model_from_checkpoint(ckpt: Checkpoint) -> Planner:
    model = Planner(ckpt.config)
    if ckpt.mode in ("samoe", "sparse"):
        model.attach_experts(jitter=0.0)
        model.mode = ckpt.mode
    load_model_tensors(model, ckpt.tensors)
    return model


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    """Directory with meta.json and one NDT1 file per tensor; written to a temp dir then renamed."""
    out = Path(path)
    tmp = out.with_name(out.name + f".tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    names = sorted(ckpt.tensors)
    for n in names:
        f = tmp / "tensors" / (n + ".ndt")
        f.parent.mkdir(parents=True, exist_ok=True)
        f.write_bytes(encode_tensor(ckpt.tensors[n]))
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(ckpt.config), "step": ckpt.step,
            "mode": ckpt.mode, "tensors": names, "loss_history": ckpt.loss_history}
    (tmp / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    if out.exists():
        old = out.with_name(out.name + f".old-{os.getpid()}")
        out.rename(old)
        tmp.rename(out)
        shutil.rmtree(old)
    else:
        tmp.rename(out)
    return out


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {meta.get('version')} unsupported")
    tensors = {n: load_tensor(root / "tensors" / (n + ".ndt")) for n in meta["tensors"]}
    return Checkpoint(config=PlannerConfig.from_dict(meta["config"]), tensors=tensors, step=meta["step"],
                      mode=meta["mode"], loss_history=list(meta["loss_history"]))


# ---------------------------------------------------------------------------
# training


def training_batch(ds: sc.Dataset, cfg: PlannerConfig, step: int):
    """Batch, noise, time and targets for a step; a pure function of (seed, step)."""
    rng = Rng(cfg.seed, 10_000 + step)
    idx = rng.integers(0, len(ds), cfg.batch_size)
    batch = make_batch(ds, idx, cfg)
    eps = rng.tensor_normal(batch.actions.shape, dtype=cfg.dtype)
    tau = sample_time(rng, size=batch.size, dtype=cfg.dtype)
    x_tau, u = interpolate(batch.actions, eps, tau)
    return batch, x_tau, tau, u


def batch_loss(model: Planner, ds: sc.Dataset, step: int) -> torch.Tensor:
    batch, x_tau, tau, u = training_batch(ds, model.cfg, step)
    return flow_loss(model(batch, x_tau, tau), u)


def run_training(model: Planner, ds: sc.Dataset, steps: int, start_step: int = 0,
                 momentum: dict[str, torch.Tensor] | None = None, history: list[float] | None = None,
                 log: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Momentum SGD with global gradient-norm clipping; aborts on a non-finite loss."""
    if len(ds) == 0:
        raise ValueError("training dataset is empty")
    cfg = model.cfg
    named = dict(model.named_parameters())
    buf = momentum or {k: torch.zeros_like(p) for k, p in named.items()}
    history = list(history or [])
    last_good = make_checkpoint(model, start_step, history, buf)
    for step in range(start_step, start_step + steps):
        try:
            loss = batch_loss(model, ds, step)
        except DegenerateRowError:
            # NaN activations surface as softmax rows with no finite entry
            raise TrainingAborted(step, last_good) from None
        if not math.isfinite(float(loss.detach())):
            raise TrainingAborted(step, last_good)
        grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(named.values(), grads)]
        norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
        scale = min(1.0, cfg.grad_clip / (float(norm) + 1e-12))
        with torch.no_grad():
            for (k, p), g in zip(named.items(), grads):
                buf[k].mul_(cfg.momentum).add_(g, alpha=scale)
                p.sub_(buf[k], alpha=cfg.lr)
        history.append(float(loss.detach()))
        if log:
            log(step, float(loss.detach()))
    return make_checkpoint(model, start_step + steps, history, buf)


def train_step1(ds: sc.Dataset, cfg: PlannerConfig, log=None) -> Checkpoint:
    model = Planner(cfg)
    return run_training(model, ds, cfg.steps, log=log)


def init_step2(ckpt1: Checkpoint, cfg: PlannerConfig | None = None) -> Planner:
    """Dense step-1 model with every MoE layer's planning FFN cloned into the expert bank."""
    cfg = cfg or ckpt1.config
    model = Planner(cfg)
    load_model_tensors(model, {k: v for k, v in ckpt1.tensors.items() if not k.startswith("optim/")})
    model.attach_experts()
    return model


def train_step2(ckpt1: Checkpoint, ds: sc.Dataset, cfg: PlannerConfig | None = None, log=None) -> Checkpoint:
    model = init_step2(ckpt1, cfg)
    return run_training(model, ds, model.cfg.steps, start_step=0, log=log)


def resume(ckpt: Checkpoint, ds: sc.Dataset, steps: int, log=None) -> Checkpoint:
    model = model_from_checkpoint(ckpt)
    named = dict(model.named_parameters())
    buf = {k: ckpt.tensors[f"optim/{k}"].clone() for k in named}
    return run_training(model, ds, steps, start_step=ckpt.step, momentum=buf, history=ckpt.loss_history, log=log)


# ---------------------------------------------------------------------------
# evaluation

HORIZON_INDEX = {"1s": 1, "2s": 3, "3s": 5}
SUCCESS_L2_M = 0.4


def sample_dataset(model: Planner, ds: sc.Dataset, seed: int, idx: Sequence[int] | None = None,
                   n_steps: int | None = None, chunk: int = 64) -> torch.Tensor:
    """Planned trajectories in metres; scene i's initial noise comes from stream (seed, 500_000 + i)."""
    idx = list(range(len(ds))) if idx is None else list(idx)
    cfg = model.cfg
    out = []
    with torch.no_grad():
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            batch = make_batch(ds, part, cfg)
            noise = torch.stack([Rng(seed, 500_000 + i).tensor_normal((cfg.K, cfg.d_a), dtype=cfg.dtype)
                                 for i in part])
            out.append(model.sample(batch, noise, n_steps).double() * cfg.action_scale)
    return torch.cat(out) if out else torch.zeros((0, cfg.K, cfg.d_a), dtype=torch.float64)


def _metrics(l2: np.ndarray, coll: np.ndarray) -> dict:
    if len(l2) == 0:
        return {"count": 0}
    per = {f"l2_{h}": float(l2[:, j].mean()) for j, h in enumerate(HORIZON_INDEX)}
    avg_sample = l2.mean(axis=1)
    success = (avg_sample < SUCCESS_L2_M) & ~coll
    return {**per, "l2_avg": float(avg_sample.mean()), "collision_avg": float(coll.mean()),
            "success_rate": float(success.mean()), "count": int(len(l2))}


def evaluate_predictions(pred: torch.Tensor, ds: sc.Dataset) -> dict:
    """L2 at 1/2/3 s, collision rate, success (mean L2 < 0.4 m and no collision), grouped by tag."""
    gt = ds.actions.double()
    err = torch.linalg.vector_norm(pred.double() - gt, dim=-1).numpy()
    l2 = err[:, list(HORIZON_INDEX.values())]
    coll = np.array([sc.waypoint_collides(s.agents, p) for s, p in zip(ds.scenes, pred.double().numpy())],
                    dtype=bool)
    report = _metrics(l2, coll)
    by_tag = {}
    for tag in sc.TAGS + ("untagged",):
        sel = np.array([(tag in t) if tag != "untagged" else not t for t in ds.tags], dtype=bool)
        if sel.any():
            by_tag[tag] = _metrics(l2[sel], coll[sel])
    report["by_tag"] = by_tag
    report["collision_metric"] = "waypoint inside agent axis-aligned box inflated by %.2f m" % sc.COLLISION_MARGIN_M
    return report


REPORT_KEYS = ("l2_1s", "l2_2s", "l2_3s", "l2_avg", "collision_avg", "success_rate", "by_tag")


def evaluate(ckpt: Checkpoint, ds: sc.Dataset, seed: int | None = None) -> dict:
    model = model_from_checkpoint(ckpt)
    pred = sample_dataset(model, ds, ckpt.config.seed if seed is None else seed)
    return evaluate_predictions(pred, ds)


def validate_report(report: dict) -> list[str]:
    problems = [f"missing key {k}" for k in REPORT_KEYS if k not in report]
    for k in REPORT_KEYS[:-1]:
        if k in report and not isinstance(report[k], float):
            problems.append(f"{k} is not a float")
    if "by_tag" in report and not isinstance(report["by_tag"], dict):
        problems.append("by_tag is not an object")
    return problems


# ---------------------------------------------------------------------------
# gradient check

GRADCHECK_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    coordinates: list[tuple[str, tuple[int, ...]]]
    analytic: list[float]
    numeric: list[float]
    rel_errors: list[float]

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors) if self.rel_errors else 0.0


def gradient_check(model: Planner, batch: PlannerBatch, x_tau: torch.Tensor, tau, u: torch.Tensor,
                   n_coords: int, rng: Rng, h: float = 1e-5, floor: float = GRADCHECK_FLOOR) -> GradCheckResult:
    """Reverse-mode vs central differences of the flow loss on random parameter coordinates.

    Only parameters that reach the loss are sampled (the dense planning FFN of an
    SA-MoE layer is replaced by its expert bank). The relative error uses
    max(|g|, |fd|, floor) as denominator: at h=1e-5 in f64 the finite
    difference carries ~1e-10 absolute round-off, so gradients far below the
    floor cannot be resolved to 1e-4 relative.
    """
    loss_fn = lambda: flow_loss(model(batch, x_tau, tau), u)
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss_fn(), [p for _, p in named], allow_unused=True)
    live = [(n, p, g) for (n, p), g in zip(named, grads) if g is not None]
    sizes = np.array([p.numel() for _, p, _ in live])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    res = GradCheckResult([], [], [], [])
    for flat in rng.integers(0, int(offsets[-1]), n_coords):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, p, g = live[i]
        index = tuple(int(v) for v in np.unravel_index(int(flat - offsets[i]), tuple(p.shape)))
        fd = central_difference(loss_fn, p, index, h)
        an = float(g[index])
        res.coordinates.append((name, index))
        res.analytic.append(an)
        res.numeric.append(fd)
        res.rel_errors.append(relative_error(an, fd, floor))
    return res
