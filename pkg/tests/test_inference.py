import csv

import numpy as np
import pytest

from nusddp.cuts import ValueFunctionApprox
from nusddp.environments import InventoryConfig, make_clustered_inventory_instance, make_inventory_instance
from nusddp.inference import (ProjectedInstance, compose_vfn, fast_infer, project_instance, refine,
                              write_inference_csv)
from nusddp.msso import StageInfeasible, evaluate_policy, rollout, sample_paths, sample_scenarios, solve_stage
from nusddp.neural import MaxAffinePredictor
from nusddp.sddp import StoppingRule, sddp_solve
from oracles import extensive_form_value


@pytest.fixture(scope="module")
def solved():
    inst = make_inventory_instance(InventoryConfig.sml_sht(domain="mean"), seed=3)
    res = sddp_solve(inst, n_iters=150, m=10, seed=0, stop=StoppingRule(stall_tol=1e-5))
    return inst, res


def _zero_model(inst, K=3):
    return MaxAffinePredictor(3, inst.stages[0].dim, inst.T, K, hidden=8, embed=4, seed=0).zero_()


def test_identity_projection_matches_original(solved):
    inst, res = solved
    proj = project_instance(inst, np.eye(inst.stages[0].dim))
    xi = sample_scenarios(inst, 3, 1).samples
    x_prev = inst.x0
    for t in range(inst.T):
        a = solve_stage(inst.stage_data(t, xi[t, 0]), x_prev, res.vfns[t])
        b = solve_stage(proj.stage_data(t, xi[t, 0]), x_prev, compose_vfn(res.vfns[t], np.eye(len(x_prev))))
        assert b.objective == pytest.approx(a.objective, rel=1e-9, abs=1e-9)
        x_prev = a.x


def test_cut_composition_consistency():
    rng = np.random.default_rng(0)
    v = ValueFunctionApprox.from_arrays(rng.normal(size=(6, 8)), rng.normal(size=6))
    G = np.linalg.qr(rng.normal(size=(8, 3)))[0]
    Y = rng.normal(size=(40, 3))
    np.testing.assert_allclose(compose_vfn(v, G)(Y), v(Y @ G.T), atol=1e-10)


def test_projection_rejects_bad_G(solved):
    inst, _ = solved
    with pytest.raises(ValueError):
        ProjectedInstance(inst, np.ones((inst.stages[0].dim, 2)))
    with pytest.raises(ValueError):
        ProjectedInstance(inst, np.eye(3))


def test_fast_with_converged_cuts_matches_policy_evaluation(solved):
    inst, res = solved
    r = fast_infer(None, np.eye(inst.stages[0].dim), inst, 30, seed=4, vfns=res.vfns)
    ref = evaluate_policy(inst, res.vfns, 30, seed=4)
    assert r.n_dropped == 0
    assert abs(r.mean - ref.mean) <= 2 * ref.stderr + 1e-6 * abs(ref.mean)
    assert r.lp_solves == 30 * inst.T


def test_zero_model_is_myopic(solved):
    inst, _ = solved
    m = _zero_model(inst)
    r = fast_infer(m, None, inst, 20, seed=2)
    # zero cuts on every stage: act greedily with theta >= 0
    ref = evaluate_policy(inst, inst.zero_vfns(), 20, seed=2)
    np.testing.assert_allclose(r.costs, ref.costs, rtol=1e-9, atol=1e-9)


def test_lift_consistency_and_feasibility(solved):
    inst, res = solved
    G = np.linalg.qr(np.vstack([a for a in res.actions]).T)[0][:, :12]
    r = fast_infer(None, G, inst, 10, seed=5, vfns=res.vfns)
    paths = sample_paths(inst, 10, 5)
    kept = 0
    for acts in r.actions:
        for x in acts:
            assert x.min() >= -1e-9
            # x lies in span(G)
            np.testing.assert_allclose(G @ (G.T @ x), x, atol=1e-9)
        kept += 1
    assert kept == 10 - r.n_dropped


def test_random_subspace_infeasibility_is_reported(solved):
    inst, res = solved
    d = inst.stages[0].dim
    # a single direction that sells without stock: transition rows cannot hold
    g = np.zeros((d, 1))
    g[0, 0] = 1.0
    r = fast_infer(None, g, inst, 5, seed=0, vfns=res.vfns)
    assert r.n_dropped == 5 and r.unusable
    with pytest.raises(StageInfeasible):
        rollout(project_instance(inst, g), [compose_vfn(v, g) for v in res.vfns], sample_paths(inst, 1, 0)[0])


def test_support_projection_recovers_optimum():
    cfg = InventoryConfig(S=1, I=1, C=4, T=2, domain="mean", name="clu")
    inst = make_clustered_inventory_instance(cfg, 2, seed=0)
    batch = sample_scenarios(inst, 3, seed=1)
    res = sddp_solve(inst, n_iters=100, seed=0, batch=batch, stop=StoppingRule(stall_iters=10, stall_tol=1e-12))
    # span of the optimal actions, which is smaller than the decision space
    U, s, _ = np.linalg.svd(np.vstack(res.actions).T, full_matrices=False)
    G = U[:, s > 1e-9 * s[0]]
    assert G.shape[1] < inst.stages[0].dim
    full = extensive_form_value(inst, batch.samples)
    projected = extensive_form_value(project_instance(inst, G), batch.samples)
    assert projected == pytest.approx(full, rel=1e-4)


def test_refine_improves_on_weak_start(solved):
    inst, res = solved
    m = _zero_model(inst)
    fast = fast_infer(m, None, inst, 30, seed=1)
    acc = refine(m, inst, n_refine=10, m=10, seed=0, n_traj=30, eval_seed=1)
    assert acc.mode == "accurate"
    assert acc.mean <= fast.mean + 2 * fast.stderr
    with pytest.raises(ValueError):
        refine(m, inst, n_refine=0)


def test_inference_csv(tmp_path, solved):
    inst, res = solved
    r = fast_infer(None, None, inst, 4, seed=0, vfns=res.vfns)
    write_inference_csv([r], tmp_path / "r.csv")
    row = next(csv.DictReader(open(tmp_path / "r.csv")))
    assert row["mode"] == "fast" and float(row["mean_cost"]) == r.mean and row["n_dropped"] == "0"
