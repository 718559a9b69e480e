"""Self-check suites run by ``verify``: each check returns a JSON-ready dict with a pass flag."""

from __future__ import annotations

import json
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import bench, cmca, dse, flow, moe, planner as pl, scenes as sc, theory
from .numerics import Rng


def _check(name: str, passed: bool, **measured) -> dict:
    return {"name": name, "passed": bool(passed), "measured": measured}


def check_euler_point_mass(seed: int) -> dict:
    rng = Rng(seed, 1)
    a = rng.tensor_normal((flow.K_STEPS, flow.ACTION_DIM), dtype=torch.float64)
    x = flow.euler_sample(lambda x, t, _: (x - a) / t, 10, rng=rng.child(1))
    err = float((x - a).abs().max())
    return _check("euler_point_mass", err <= 1e-5, max_abs_err=err)


def check_cmca_mask(seed: int, layouts: int = 50) -> dict:
    rng = Rng(seed, 2)
    bad = 0
    for i in range(layouts):
        r = rng.child(i)
        L = int(r.integers(2, 24))
        perm = r.permutation(L)
        n_act = int(r.integers(1, L))
        act = tuple(sorted(int(v) for v in perm[:n_act]))
        cond = tuple(sorted(int(v) for v in perm[n_act:]))
        layout = cmca.CmcaLayout(L, cond, act, plan_len=n_act)
        mask = cmca.build_mask(layout, torch.float64)
        for q in range(L):
            for k in range(L):
                want = k in cond or (q in act and k in act and k <= q)
                bad += int(bool(mask[q, k]) != want)
    return _check("cmca_mask_truth_table", bad == 0, mismatches=bad, layouts=layouts)


@torch.no_grad()
def check_dense_equivalence(seed: int) -> dict:
    ds = sc.build_dataset(sc.generate(8, list(sc.REGIMES), seed))
    cfg = pl.PlannerConfig(seed=seed, batch_size=8)
    dense = pl.Planner(cfg)
    merged = pl.init_step2(pl.make_checkpoint(dense, 0))
    worst = 0.0
    for step in range(4):
        batch, x, tau, _ = pl.training_batch(ds, cfg, step)
        worst = max(worst, float((dense(batch, x, tau) - merged(batch, x, tau)).abs().max()))
    return _check("dense_equivalence", worst <= 1e-6, max_abs_diff=worst)


def check_gradient(seed: int, coords: int = 50) -> dict:
    ds = theory.lab_dataset(seed, count=4)
    model = theory.lab_planner(seed, layers=2, d=16, m=32, heads=2, routing_width=8, routing_heads=2, batch_size=2)
    rng = Rng(seed, 3)
    with torch.no_grad():
        # zero offsets put every sample on an integer cell where bilinear sampling has a kink
        model.dse.offset_w.copy_(rng.tensor_normal(model.dse.offset_w.shape, torch.float64, 0.05))
        model.dse.offset_b.copy_(rng.tensor_normal(model.dse.offset_b.shape, torch.float64, 0.3))
    batch, x, tau, u = pl.training_batch(ds, model.cfg, 0)
    res = pl.gradient_check(model, batch, x, tau, u, coords, rng.child(1))
    return _check("planner_gradient", res.max_rel_error <= 1e-4, max_rel_error=res.max_rel_error, coords=coords)


def check_flops(seed: int) -> dict:
    f = bench.flops_model(bench.CostConfig(B=2, L=512))
    one = bench.flops_model(bench.CostConfig(E=1, k=1))["gated"]
    trio = [one[k] for k in ("dense", "sparse", "samoe")]
    spread = max(trio) / min(trio) - 1.0
    ratio = f["ratio_sparse_over_samoe"]
    return _check("flops", 1.9 <= ratio <= 2.0 and spread <= 1e-3, ratio=ratio, single_expert_spread=spread)


def check_tags(seed: int) -> dict:
    cases = [((40, 0.0, 100.0), set()), ((41, 0.0, 100.0), {"dense"}), ((0, 0.05, 100.0), set()),
             ((0, 0.051, 100.0), {"high_yaw"}), ((0, 0.0, 8.0), set()), ((0, 0.0, 7.9), {"close_prox"}),
             ((52.105, 0.0764, 6.323), {"dense", "high_yaw", "close_prox"})]
    bad = [c for c, want in cases if sc.select_challenging(sc.SceneStats(*c)) != want]
    return _check("scenario_tags", not bad, failures=[list(c) for c in bad])


@torch.no_grad()
def check_zero_offset_conv(seed: int, cases: int = 50) -> dict:
    rng = Rng(seed, 4)
    worst = 0.0
    for i in range(cases):
        r = rng.child(i)
        B, C, H, W, K = 2, int(r.integers(1, 4)), int(r.integers(3, 9)), int(r.integers(3, 9)), (1, 3, 5)[i % 3]
        f = r.tensor_normal((B, C, H, W))
        w = r.tensor_normal((3, C, K, K))
        b = r.tensor_normal((3,))
        got = dse.deformable_conv(f, torch.zeros(B, 2 * K * K, H, W), w, b)
        worst = max(worst, float((got - F.conv2d(f, w, b, padding=K // 2)).abs().max()))
    return _check("zero_offset_conv", worst <= 1e-5, max_abs_diff=worst, cases=cases)


@torch.no_grad()
def check_near_field(seed: int) -> dict:
    rng = Rng(seed, 5)
    bad = 0
    for i in range(20):
        H, W = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        c = (int(rng.integers(0, H)), int(rng.integers(0, W)))
        g = dse.near_field_map(H, W, c).grid
        bad += int(float(g[c]) != 1.0 or (H * W > 1 and float(g.min()) != 0.0))
    return _check("near_field_endpoints", bad == 0, failures=bad)


@torch.no_grad()
def check_merge_exactness(seed: int, cases: int = 100) -> dict:
    rng = Rng(seed, 6)
    worst_res, worst_out = 0.0, 0.0
    for i in range(cases):
        r = rng.child(i)
        E, d, m = int(r.integers(2, 6)), int(r.integers(2, 9)), int(r.integers(2, 17))
        bank = moe.ExpertBank(E, d, m, rng=r.child(1), dtype=torch.float64)
        x = r.tensor_normal((3, d), torch.float64)
        k = int(r.integers(0, E))
        onehot = torch.zeros(E, dtype=torch.float64)
        onehot[k] = 1.0
        same = moe.ExpertBank.from_dense(bank.w1[0], bank.w3[0], bank.w2[0], E)
        pi = torch.from_numpy(r.dirichlet(np.ones(E)))
        worst_res = max(worst_res, float(moe.merging_residual(bank, onehot, x)), float(moe.merging_residual(same, pi, x)))
        bank32 = moe.ExpertBank(E, d, m, rng=r.child(2))
        got = moe.swiglu_forward(x.float(), moe.merge_experts(bank32, onehot.float()))
        worst_out = max(worst_out, float((got - moe.swiglu_forward(x.float(), bank32.expert(k))).abs().max()))
    return _check("merge_exactness", worst_res <= 1e-12 and worst_out <= 1e-6,
                  max_residual_f64=worst_res, max_output_diff_f32=worst_out, cases=cases)


def check_dispersion_identity(seed: int) -> dict:
    rep = theory.exp_dispersion_identity(Rng(seed, 7))
    return _check("dispersion_identity", rep.status == "pass", **rep.measured)


@torch.no_grad()
def check_cmca_invariance(seed: int) -> dict:
    rng = Rng(seed, 8)
    block = cmca.CmcaBlock(16, 32, 2, rng=rng.child(1), dtype=torch.float64)
    layout = cmca.CmcaLayout.canonical(3, 2, 2, 1, 6)
    x = rng.tensor_normal((2, layout.total_len, 16), torch.float64)
    base = block(x, layout)
    n_cond = len(layout.cond_indices)
    j = n_cond + 3
    x2 = x.clone()
    x2[:, j] += rng.tensor_normal((2, 16), torch.float64)
    moved = block(x2, layout)
    cond_same = bool(torch.equal(base[:, :n_cond], moved[:, :n_cond]))
    prefix_same = bool(torch.equal(base[:, :j], moved[:, :j]))
    r = 4
    short = block(x[:, :n_cond + r], layout.truncated(r))
    prefix = float((short - base[:, :n_cond + r]).abs().max())
    return _check("cmca_invariance", cond_same and prefix_same and prefix <= 1e-6,
                  conditioning_bit_identical=cond_same, earlier_actions_bit_identical=prefix_same,
                  causal_prefix_diff=prefix)


SUITES: dict[str, list[Callable[[int], dict]]] = {
    "numerics": [check_gradient],
    "scene-synth": [check_tags],
    "dse": [check_zero_offset_conv, check_near_field],
    "moe": [check_merge_exactness, check_dispersion_identity],
    "cmca": [check_cmca_mask, check_cmca_invariance],
    "flow": [check_euler_point_mass],
    "planner": [check_dense_equivalence],
    "bench": [check_flops],
}


def run_suite(name: str, seed: int, experiment: str = "all") -> list[dict]:
    if name == "theory":
        names = theory.EXPERIMENTS if experiment == "all" else [experiment]
        out = []
        for n in names:
            rep = theory.run_experiment(n, seed)
            out.append({"name": rep.name, "passed": rep.status != "fail", "status": rep.status,
                        "report": json.loads(rep.to_json())})
        return out
    if name == "all":
        return [r for s in (*SUITES, "theory") for r in run_suite(s, seed, experiment)]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from theory, {', '.join(SUITES)}, all")
    return [fn(seed) for fn in SUITES[name]]
