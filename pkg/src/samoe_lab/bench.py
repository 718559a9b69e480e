"""Analytic FLOPs model and measured latency / throughput / memory for dense,
sparse top-k, soft-slot and SA-MoE FFN layers."""

from __future__ import annotations

import csv
import gc
import io
import statistics
import time
import weakref
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import torch
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils._pytree import tree_flatten

from .dse import DeformableSceneEncoder
from .moe import ExpertBank, MergedFfn, merge_experts, soft_moe_forward, sparse_moe_forward, swiglu_forward
from .numerics import Rng

MECHANISMS = ("dense", "sparse", "soft", "samoe")
CSV_COLUMNS = ("mechanism", "d", "m", "E", "k", "flops_per_token", "median_ms", "tokens_per_s", "peak_bytes",
               "steady_bytes", "params")
MIN_TICKS = 50


class ProblemTooSmallError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostConfig:
    d: int = 256
    m: int = 1024
    E: int = 4
    k: int = 2
    slots: int = 1
    B: int = 8
    L: int = 512
    moe_layers: int = 4
    routing_width: int = 32
    grid: int = 32
    channels: int = 16
    dispatch_coef: float = 0.0

    def __post_init__(self):
        for name in ("d", "m", "E", "k", "slots", "B", "L", "moe_layers", "routing_width", "grid", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k > self.E:
            raise ValueError(f"k={self.k} exceeds E={self.E}")

    @classmethod
    def from_dict(cls, d: dict) -> "CostConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bench keys: {sorted(unknown)}")
        return cls(**{k: type(getattr(cls(), k))(v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# analytic model


def flops_model(cfg: CostConfig) -> dict:
    """Per-token FLOPs (1 multiply-add = 2 FLOPs) under the three-matrix gated-FFN convention.

    With a single expert there is nothing to route or merge, so those terms vanish.
    """
    d, m, E, k, S, BL = cfg.d, cfg.m, cfg.E, cfg.k, cfg.slots, cfg.B * cfg.L
    ffn = 6 * d * m
    multi = E > 1
    terms = {
        "dense": {"ffn": ffn},
        "sparse": {"ffn": k * ffn, "routing": 2 * d * E if multi else 0, "dispatch": cfg.dispatch_coef * d},
        "soft": {"ffn": S * E * ffn / cfg.L, "dispatch_combine": 2 * E * S * d},
        "samoe": {"ffn": ffn, "merge": 2 * E * 3 * d * m / BL if multi else 0.0,
                  "routing_head": 2 * cfg.routing_width * E / BL if multi else 0.0},
    }
    out = {mech: float(sum(t.values())) for mech, t in terms.items()}
    # single-matrix convention (one expert forward = 2dm) printed alongside
    two = {"dense": 2 * d * m, "sparse": k * 2 * d * m + terms["sparse"]["routing"] + terms["sparse"]["dispatch"],
           "soft": S * E * 2 * d * m / cfg.L + terms["soft"]["dispatch_combine"],
           "samoe": 2 * d * m + (2 * E * d * m / BL if multi else 0.0) + terms["samoe"]["routing_head"]}
    return {"gated": out, "single_matrix": {k_: float(v) for k_, v in two.items()}, "terms": terms,
            "ratio_sparse_over_samoe": out["sparse"] / out["samoe"]}


def dse_flops_per_sample(cfg: CostConfig, kernel: int = 3, queries: int = 4) -> float:
    """Routing encoder cost per scene; depends on the grid, not on the token sequence length."""
    hw = cfg.grid * cfg.grid
    taps = kernel * kernel
    offsets = 2 * (cfg.channels + 1) * 9 * (2 * taps) * hw
    sample = 4 * 2 * cfg.channels * taps * hw
    conv = 2 * cfg.channels * taps * cfg.routing_width * hw
    attn = 2 * 2 * hw * cfg.routing_width ** 2 + 2 * 2 * queries * hw * cfg.routing_width
    heads = cfg.moe_layers * 2 * cfg.routing_width * cfg.E
    return float(offsets + sample + conv + attn + heads)


def param_counts(cfg: CostConfig) -> dict:
    ffn = 3 * cfg.d * cfg.m
    return {"dense": ffn, "sparse": cfg.E * ffn + cfg.d * cfg.E, "soft": cfg.E * ffn + cfg.E * cfg.slots * cfg.d,
            "samoe": cfg.E * ffn + cfg.routing_width * cfg.E + cfg.E}


# ---------------------------------------------------------------------------
# allocation counter


class AllocationCounter(TorchDispatchMode):
    """Counts bytes of storages created inside the mode; freed when their last tensor dies.

    Storages that existed before entering (parameters, inputs) are ignored.
    """

    def __init__(self, external: Sequence[torch.Tensor] = ()):
        super().__init__()
        self.external = {t.untyped_storage().data_ptr() for t in external}
        self.refs: dict[int, int] = {}
        self.sizes: dict[int, int] = {}
        self.live = 0
        self.peak = 0

    def _release(self, key: int) -> None:
        self.refs[key] -= 1
        if self.refs[key] == 0:
            self.live -= self.sizes.pop(key)
            del self.refs[key]

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for t in tree_flatten(out)[0]:
            if not isinstance(t, torch.Tensor):
                continue
            st = t.untyped_storage()
            key = st.data_ptr()
            if key in self.external or key == 0:
                continue
            if key not in self.refs:
                self.refs[key] = 0
                self.sizes[key] = st.nbytes()
                self.live += st.nbytes()
                self.peak = max(self.peak, self.live)
            self.refs[key] += 1
            weakref.finalize(t, self._release, key)
        return out


# ---------------------------------------------------------------------------
# measured harness


@dataclass
class LayerFixture:
    x: torch.Tensor
    bank: ExpertBank
    dense: MergedFfn
    router: torch.Tensor
    slots: torch.Tensor
    pi: torch.Tensor
    k: int

    def tensors(self) -> list[torch.Tensor]:
        return [self.x, self.bank.w1, self.bank.w2, self.bank.w3, self.dense.w1, self.dense.w2, self.dense.w3,
                self.router, self.slots, self.pi]


def make_fixture(cfg: CostConfig, rng: Rng) -> LayerFixture:
    dt = torch.float32
    bank = ExpertBank(cfg.E, cfg.d, cfg.m, rng=rng.child(1), dtype=dt)
    dense = ExpertBank(1, cfg.d, cfg.m, rng=rng.child(2), dtype=dt).expert(0)
    return LayerFixture(
        x=rng.child(3).tensor_normal((cfg.B, cfg.L, cfg.d), dtype=dt),
        bank=bank, dense=dense,
        router=rng.child(4).tensor_normal((cfg.d, cfg.E), dtype=dt, scale=cfg.d ** -0.5),
        slots=rng.child(5).tensor_normal((cfg.E, cfg.slots, cfg.d), dtype=dt, scale=cfg.d ** -0.5),
        pi=torch.softmax(rng.child(6).tensor_normal((cfg.B, cfg.E), dtype=dt), dim=-1), k=cfg.k)


def layer_fn(mech: str, fx: LayerFixture) -> Callable[[], torch.Tensor]:
    if mech == "dense":
        return lambda: swiglu_forward(fx.x, fx.dense)
    if mech == "sparse":
        return lambda: sparse_moe_forward(fx.bank, fx.router, fx.x, fx.k)
    if mech == "soft":
        return lambda: soft_moe_forward(fx.bank, fx.slots, fx.x)
    if mech == "samoe":
        return lambda: swiglu_forward(fx.x, merge_experts(fx.bank, fx.pi))
    raise KeyError(f"unknown mechanism {mech!r}")


def time_fn(fn: Callable[[], object], reps: int, warmup: int = 3) -> list[float]:
    if reps < 10:
        raise ValueError("need at least 10 timed repetitions")
    with torch.no_grad():
        for _ in range(warmup):
            fn()
        out = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
    return out


def check_resolution(median_s: float) -> None:
    tick = time.get_clock_info("perf_counter").resolution
    if median_s < MIN_TICKS * tick:
        raise ProblemTooSmallError(f"median {median_s:.3g}s is under {MIN_TICKS} timer ticks; increase the problem size")


def measure_memory(fn: Callable[[], torch.Tensor], external: Sequence[torch.Tensor]) -> tuple[int, int]:
    """(peak bytes during one forward, bytes still live after the output is dropped)."""
    gc.collect()
    with torch.no_grad(), AllocationCounter(external) as counter:
        out = fn()
        del out
        gc.collect()
    return counter.peak, counter.live


@dataclass
class BenchRow:
    mechanism: str
    d: int
    m: int
    E: int
    k: int
    flops_per_token: float
    median_ms: float
    tokens_per_s: float
    peak_bytes: int
    steady_bytes: int
    params: int


@dataclass
class BenchReport:
    config: dict
    flops: dict
    rows: list[BenchRow] = field(default_factory=list)
    router: dict | None = None
    dispatch_coef_calibrated: float | None = None

    def to_dict(self) -> dict:
        return {"config": self.config, "flops": self.flops, "rows": [asdict(r) for r in self.rows],
                "router": self.router, "dispatch_coef_calibrated": self.dispatch_coef_calibrated}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([getattr(r, c) for c in CSV_COLUMNS])
        return buf.getvalue()


def latency_bench(cfg: CostConfig, impls: Sequence[str] = MECHANISMS, reps: int = 10, rng: Rng | None = None,
                  warmup: int = 3) -> BenchReport:
    rng = rng or Rng(0, 808)
    fx = make_fixture(cfg, rng)
    flops = flops_model(cfg)
    params = param_counts(cfg)
    report = BenchReport(config=asdict(cfg), flops=flops)
    medians = {}
    for mech in impls:
        fn = layer_fn(mech, fx)
        med = statistics.median(time_fn(fn, reps, warmup))
        check_resolution(med)
        medians[mech] = med
        peak, steady = measure_memory(fn, fx.tensors())
        report.rows.append(BenchRow(mechanism=mech, d=cfg.d, m=cfg.m, E=cfg.E, k=cfg.k,
                                    flops_per_token=flops["gated"][mech], median_ms=med * 1e3,
                                    tokens_per_s=cfg.B * cfg.L / med, peak_bytes=peak, steady_bytes=steady,
                                    params=params[mech]))
    if "sparse" in medians and "dense" in medians:
        # excess sparse time over k dense FFNs, in dense-FLOP equivalents per token per width unit
        excess = (medians["sparse"] / medians["dense"] - cfg.k) * 6 * cfg.d * cfg.m
        report.dispatch_coef_calibrated = float(excess / cfg.d)
    return report


def router_bench(cfg: CostConfig, reps: int = 10, rng: Rng | None = None) -> dict:
    """DSE forward alone vs the whole SA-MoE layer stack (routing once + merge/FFN per layer)."""
    rng = rng or Rng(0, 909)
    fx = make_fixture(cfg, rng)
    layers = list(range(cfg.moe_layers))
    dse = DeformableSceneEncoder(cfg.channels, (cfg.grid, cfg.grid), (cfg.grid // 2, cfg.grid // 2), layers, cfg.E,
                                 hidden=cfg.routing_width, rng=rng.child(7))
    grid = rng.child(8).tensor_normal((cfg.B, cfg.channels, cfg.grid, cfg.grid))

    def stack():
        hidden = dse(grid)
        h = fx.x
        for i in layers:
            h = h + swiglu_forward(h, merge_experts(fx.bank, dse.routing_weights(hidden, i)))
        return h

    dse_t = statistics.median(time_fn(lambda: dse(grid), reps))
    before = dse.computations
    with torch.no_grad():
        stack()
    computed = dse.computations - before
    total_t = statistics.median(time_fn(stack, reps))
    check_resolution(dse_t)
    share = dse_t / total_t
    return {"dse_ms": dse_t * 1e3, "stack_ms": total_t * 1e3, "share": share, "share_ok": share < 0.10,
            "dse_computations_per_forward": computed, "moe_layers": cfg.moe_layers,
            "dse_flops_per_sample": dse_flops_per_sample(cfg)}


def run_bench(cfg: CostConfig, reps: int = 10, seed: int = 0, impls: Sequence[str] = MECHANISMS) -> BenchReport:
    report = latency_bench(cfg, impls, reps, Rng(seed, 808))
    report.router = router_bench(cfg, reps, Rng(seed, 909))
    return report
