import json

import numpy as np
import pytest
import torch

from samoe_lab import planner as pl, scenes as sc, theory
from samoe_lab.moe import ExpertBank
from samoe_lab.numerics import Rng

f64 = torch.float64


def _scalar_bank(values):
    bank = ExpertBank(len(values), 1, 1, dtype=f64, scale=0.0)
    with torch.no_grad():
        bank.w1.copy_(torch.tensor(values, dtype=f64).reshape(-1, 1, 1))
    return bank


def test_dispersion_identity_hand_case():
    lhs, rhs = theory.dispersion_sides(_scalar_bank([0.0, 2.0]), torch.tensor([0.5, 0.5], dtype=f64))
    assert lhs == 1.0 and rhs == 1.0


def test_dispersion_identity_degenerate_cases():
    bank = ExpertBank(4, 3, 5, rng=Rng(0, 1), dtype=f64)
    assert theory.dispersion_sides(bank, torch.eye(4, dtype=f64)[2]) == (0.0, 0.0)
    same = ExpertBank.from_dense(bank.w1[0], bank.w3[0], bank.w2[0], 4)
    assert theory.dispersion_sides(same, torch.full((4,), 0.25, dtype=f64)) == (0.0, 0.0)
    with pytest.raises(theory.ExperimentError):
        theory.exp_dispersion_identity(Rng(0, 1), trials=0)


def test_residual_vanishes_with_scale():
    res, _ = theory.residual_curve(Rng(0, 2), [1e-1, 1e-3, 1e-6, 0.0])
    assert res[0] > res[1] > res[2] > 0 and res[3] <= 1e-15
    with pytest.raises(theory.ExperimentError):
        theory.exp_residual_bound(Rng(0, 2), scales=[1e-3, 1e-2, 1e-1])


def test_residual_slope_is_input_scale_invariant():
    rep = theory.exp_residual_bound(Rng(3, 2))
    assert rep.passed
    assert rep.measured["slope_span_across_input_scales"] < 0.05


@pytest.mark.parametrize("name", ["dispersion_identity", "residual_bound", "bilipschitz_probe"])
def test_reports_are_deterministic_and_round_trip(name):
    a, b = theory.run_experiment(name, 2), theory.run_experiment(name, 2)
    assert a.to_json() == b.to_json()
    assert theory.ExperimentReport.from_json(a.to_json()).to_json() == a.to_json()
    assert a.status == "pass"


def test_bilipschitz_constants_are_ordered():
    rep = theory.run_experiment("bilipschitz_probe", 1)
    L, c = rep.measured["L_empirical"], rep.measured["c_empirical"]
    assert np.isfinite(L) and 0 < c <= L


def test_zero_dispersion_bank_is_inconclusive():
    model = theory.lab_planner(0, jitter=0.0)
    with pytest.raises(theory.InconclusiveExperiment):
        theory.mechanism_dispersions(model, theory.lab_dataset(0), Rng(0, 505))


def test_single_scene_samoe_dispersion_is_zero():
    model = theory.lab_planner(0)
    ds = theory.lab_dataset(0, count=1)
    disp = theory.mechanism_dispersions(model, ds, Rng(0, 505))
    assert disp["samoe"] <= 1e-20 and disp["sparse"] > 0


def test_variance_ordering_needs_three_regimes():
    ds = sc.build_dataset(sc.generate(4, ["nominal", "overtake"], 0), theory.LAB_RASTER)
    with pytest.raises(theory.ExperimentError):
        theory.exp_variance_ordering(seeds=[0], ds=ds)


def test_trajectory_divergence_examples():
    rep = theory.run_experiment("trajectory_divergence", 0)
    sa = rep.measured["samoe"]
    dev = np.array(sa["deviation"]).reshape(-1, 3)
    assert bool((dev[:, 2] < dev[:, 0]).all())
    assert rep.measured["sparse"]["persist_ratio"] >= 0.1
    # identical scenes give identical trajectories
    model = theory.lab_planner(0)
    ds = theory.lab_dataset(0)
    batch = pl.make_batch(ds, [0], model.cfg)
    noise = Rng(0, 1).tensor_normal((1, 6, 2), f64)
    with torch.no_grad():
        assert torch.equal(model.sample(batch, noise), model.sample(batch, noise))


def test_gradient_stability_report():
    rep = theory.run_experiment("gradient_stability", 0)
    m = rep.measured
    assert rep.passed and len(m["ratios"]) == 64
    assert abs(m["half_step_ratio"] - 0.5) <= 0.1
    assert m["max_second_half"] <= 2 * m["max_first_half"]


def test_unknown_experiment():
    with pytest.raises(KeyError):
        theory.run_experiment("nope", 0)
