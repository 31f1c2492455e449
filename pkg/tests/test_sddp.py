import csv

import numpy as np
import pytest

from nusddp.cuts import Cut, ValueFunctionApprox
from nusddp.environments import InventoryConfig, make_inventory_instance
from nusddp.msso import sample_scenarios, solve_stage
from nusddp.sddp import (SddpState, StoppingRule, backward_pass, forward_pass, lower_bound, sddp_solve, stage_cut,
                         upper_bound_estimate, write_bound_history)
from instances import probe_points, tiny_inventory
from oracles import cost_to_go, extensive_form_value

EXACT = StoppingRule(stall_iters=25, stall_tol=1e-12)


def test_matches_extensive_form_on_tiny_trees():
    rng = np.random.default_rng(7)
    for _ in range(4):
        inst, batch = tiny_inventory(rng)
        res = sddp_solve(inst, n_iters=400, seed=1, stop=EXACT, batch=batch)
        ref = extensive_form_value(inst, batch.samples)
        assert res.lower_bound == pytest.approx(ref, rel=1e-5)


def test_lower_bound_monotone_and_cuts_valid():
    rng = np.random.default_rng(8)
    inst, batch = tiny_inventory(rng, C=2, T=3, m=3)
    res = sddp_solve(inst, n_iters=60, seed=2, stop=EXACT, batch=batch)
    assert np.all(np.diff(res.lb_history) >= -1e-9)
    for t in range(inst.T - 1):
        for x in probe_points(inst, t, 15, rng):
            v = cost_to_go(inst, batch.samples, t, x)
            assert np.all(res.vfns[t](x) <= v + 1e-6)


def test_stage_cut_averages_supporting_planes():
    inst = make_inventory_instance(InventoryConfig.sml_sht(), seed=1)
    batch = sample_scenarios(inst, 4, seed=0)
    vf = inst.initial_vfns()
    x_prev = np.abs(np.random.default_rng(0).normal(size=inst.stages[0].dim)) * 5
    cut = stage_cut(inst, 1, x_prev, vf[1], batch.samples[1])
    # at the trial point the cut equals the mean stage value (strong duality)
    vals = [solve_stage(inst.stage_data(1, xi), x_prev, vf[1]).objective for xi in batch.samples[1]]
    assert cut(x_prev) == pytest.approx(np.mean(vals), rel=1e-9, abs=1e-8)


def test_forward_then_backward_adds_one_cut_per_stage():
    inst = make_inventory_instance(InventoryConfig.sml_sht(), seed=1)
    batch = sample_scenarios(inst, 5, seed=0)
    state = SddpState(inst.initial_vfns())
    traj = forward_pass(inst, state, batch, np.zeros((1, inst.T), dtype=int))
    assert traj.x[0].shape == (1, inst.stages[0].dim)
    backward_pass(inst, state, batch)
    assert [len(v) for v in state.vfns] == [2] * (inst.T - 1) + [1]


def test_backward_requires_forward():
    inst = make_inventory_instance(InventoryConfig.sml_sht(), seed=1)
    with pytest.raises(RuntimeError):
        backward_pass(inst, SddpState(inst.initial_vfns()), sample_scenarios(inst, 2, 0))


def test_initial_vfns_not_mutated_and_determinism():
    inst = make_inventory_instance(InventoryConfig.sml_sht(), seed=2)
    init = inst.initial_vfns()
    a = sddp_solve(inst, init, n_iters=5, m=5, seed=3)
    b = sddp_solve(inst, init, n_iters=5, m=5, seed=3)
    assert [len(v) for v in init] == [1] * inst.T
    assert a.lb_history == b.lb_history
    assert a.actions[0].shape == (5, inst.stages[0].dim)


def test_gap_stopping_and_bound_history(tmp_path):
    rng = np.random.default_rng(4)
    inst, batch = tiny_inventory(rng, C=1, T=2, m=2)
    res = sddp_solve(inst, n_iters=100, seed=0, batch=batch,
                     stop=StoppingRule(gap_tol=1e-6, ub_every=1, ub_traj=40, stall_iters=1000))
    assert res.converged and res.reason == "gap"
    write_bound_history(res.bound_rows, tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == res.iterations
    assert float(rows[-1]["lower_bound"]) == res.lower_bound


def test_upper_bound_estimate_brackets_lower_bound():
    inst = make_inventory_instance(InventoryConfig.sml_sht(domain="mean"), seed=5)
    batch = sample_scenarios(inst, 10, seed=0)
    res = sddp_solve(inst, n_iters=200, seed=0, stop=StoppingRule(stall_tol=1e-6), batch=batch)
    # rollouts on the same sampled tree, so the bound applies
    ub = upper_bound_estimate(inst, res.vfns, 200, seed=1, batch=batch)
    assert ub["mean"] + 3 * ub["stderr"] >= res.lower_bound - 1e-6 * abs(res.lower_bound)
    assert lower_bound(inst, res.vfns) == res.lower_bound


def test_guided_forward_passes_keep_cuts_valid():
    rng = np.random.default_rng(12)
    inst, batch = tiny_inventory(rng, C=2, T=3, m=3)
    # a guide far above the true cost-to-go must not leak into the cuts
    guide = [ValueFunctionApprox.from_arrays(v.betas, v.alphas + 1e4) for v in inst.initial_vfns()]
    res = sddp_solve(inst, n_iters=400, seed=1, stop=EXACT, batch=batch, guide_vfns=guide, guide_iters=5)
    assert res.iterations >= 5 + EXACT.stall_iters
    assert res.lower_bound == pytest.approx(extensive_form_value(inst, batch.samples), rel=1e-5)
    for t in range(inst.T - 1):
        for x in probe_points(inst, t, 10, rng):
            assert np.all(res.vfns[t](x) <= cost_to_go(inst, batch.samples, t, x) + 1e-6)
