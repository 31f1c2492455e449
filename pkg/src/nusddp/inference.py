"""Fast inference with predicted cuts in a projected decision space, plus SDDP refinement.

With ``x = G y`` each stage LP is solved over the free variable ``y``; the
original sign constraints become explicit rows ``G y >= 0``.  Predicted
cuts ``beta^T x + alpha`` turn into ``(G^T beta)^T y + alpha``.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cuts import ValueFunctionApprox
from .msso import ProblemInstance, StageData, StageInfeasible, cost_stats, evaluate_policy, rollout, sample_paths
from .neural import MaxAffinePredictor, predicted_vfns
from .sddp import StoppingRule, sddp_solve

log = logging.getLogger(__name__)

UNUSABLE_DROP_FRACTION = 0.2
CSV_FIELDS = ["instance", "mode", "mean_cost", "std_cost", "n_traj", "n_dropped", "unusable",
              "predict_ms", "project_ms", "solve_ms", "refine_ms", "total_ms"]


class ProjectedInstance:
    """View of ``inst`` in the coordinates ``x = G y``.

    Only the interface used by rollouts is provided.  Stage 1 still couples
    to the full-dimensional ``x0``.
    """

    def __init__(self, inst: ProblemInstance, G):
        G = np.asarray(G, dtype=float)
        if G.ndim != 2 or G.shape[0] != inst.stages[0].dim:
            raise ValueError(f"G must have {inst.stages[0].dim} rows, got shape {G.shape}")
        if any(st.dim != G.shape[0] for st in inst.stages):
            raise ValueError("a shared projection needs equal stage dimensions")
        if np.abs(G.T @ G - np.eye(G.shape[1])).max() > 1e-8:
            raise ValueError("G must have orthonormal columns")
        self.base, self.G = inst, G
        self.x0 = inst.x0
        self.xi_1 = inst.xi_1
        self.dist = inst.dist
        self.name = inst.name

    @property
    def T(self) -> int:
        return self.base.T

    @property
    def p(self) -> int:
        return self.G.shape[1]

    def dims(self):
        return [self.p] * self.T

    def stage_data(self, t, xi) -> StageData:
        full = self.base.stage_data(t, xi)
        G = self.G
        d = G.shape[0]
        B = full.B if t == 0 else full.B @ G
        B_ge = full.B_ge if t == 0 else full.B_ge @ G
        return StageData(
            c=G.T @ full.c, A=full.A @ G, B=B, b=full.b,
            A_ge=np.vstack([full.A_ge @ G, G]), B_ge=np.vstack([B_ge, np.zeros((d, B_ge.shape[1]))]),
            b_ge=np.concatenate([full.b_ge, np.zeros(d)]),
            nonneg=np.zeros(self.p, dtype=bool),
        )

    def initial_vfns(self):
        return [compose_vfn(v, self.G) for v in self.base.initial_vfns()]


def project_instance(inst: ProblemInstance, G) -> ProjectedInstance:
    return ProjectedInstance(inst, G)


def compose_vfn(vfn: ValueFunctionApprox, G) -> ValueFunctionApprox:
    """``y -> vfn(G y)`` as cuts in ``y``-space."""
    return ValueFunctionApprox.from_arrays(vfn.betas @ G, vfn.alphas)


@dataclass
class InferenceResult:
    instance: str
    mode: str
    costs: np.ndarray
    actions: list                      # actions[j][t] of the kept trajectories
    mean: float
    std: float
    stderr: float
    n_traj: int
    n_dropped: int = 0
    unusable: bool = False
    lp_solves: int = 0
    timings: dict = field(default_factory=dict)
    lower_bound: float = float("nan")
    vfns: list = None

    def row(self) -> dict:
        t = self.timings
        return {"instance": self.instance, "mode": self.mode, "mean_cost": self.mean, "std_cost": self.std,
                "n_traj": self.n_traj, "n_dropped": self.n_dropped, "unusable": int(self.unusable),
                "predict_ms": t.get("predict_ms", 0.0), "project_ms": t.get("project_ms", 0.0),
                "solve_ms": t.get("solve_ms", 0.0), "refine_ms": t.get("refine_ms", 0.0),
                "total_ms": t.get("total_ms", 0.0)}


def write_inference_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in results:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.row().items()})


def fast_infer(model: MaxAffinePredictor, G, inst: ProblemInstance, n_traj: int = 50, seed=None,
               vfns=None) -> InferenceResult:
    """One forward pass per trajectory with predicted cuts in the projected space.

    ``vfns`` replaces the model's prediction (full-space cuts), which is
    useful to check the projection machinery on known cuts.
    """
    t0 = time.perf_counter()
    full = predicted_vfns(model, inst) if vfns is None else vfns
    t1 = time.perf_counter()
    G = np.eye(inst.stages[0].dim) if G is None else np.asarray(G, dtype=float)
    if G.shape[0] == G.shape[1]:
        # a full-rank G is a rotation: x = G y with G y >= 0 is the original problem
        project_instance(inst, G)  # shape and orthonormality checks only
        G = np.eye(G.shape[0])
        proj, yv = inst, full
    else:
        proj = project_instance(inst, G)
        yv = [compose_vfn(v, G) for v in full]
    t2 = time.perf_counter()
    paths = sample_paths(inst, n_traj, seed)
    counter = [0]
    costs, acts, dropped = [], [], 0
    for j in range(n_traj):
        try:
            cost, ys = rollout(proj, yv, paths[j], trajectory=j, counter=counter)
        except StageInfeasible as exc:
            log.warning("%s: projected trajectory dropped (%s)", inst.name, exc)
            dropped += 1
            continue
        costs.append(cost)
        acts.append([G @ y for y in ys])
    t3 = time.perf_counter()
    unusable = dropped > UNUSABLE_DROP_FRACTION * n_traj
    if unusable:
        log.warning("%s: %d of %d projected trajectories infeasible; projection unusable", inst.name, dropped, n_traj)
    st = cost_stats(costs) if costs else None
    return InferenceResult(
        instance=inst.name, mode="fast", costs=np.asarray(costs), actions=acts,
        mean=st.mean if st else float("nan"), std=st.std if st else float("nan"),
        stderr=st.stderr if st else float("nan"), n_traj=n_traj, n_dropped=dropped, unusable=unusable,
        lp_solves=counter[0],
        timings={"predict_ms": (t1 - t0) * 1e3, "project_ms": (t2 - t1) * 1e3, "solve_ms": (t3 - t2) * 1e3,
                 "total_ms": (t3 - t0) * 1e3},
        vfns=full,
    )


def refine(model: MaxAffinePredictor, inst: ProblemInstance, n_refine: int = 10, m: int = 20, seed=None,
           n_traj: int = 50, eval_seed=None) -> InferenceResult:
    """Run ``n_refine`` SDDP iterations from the predicted cuts and evaluate the result."""
    if n_refine < 1:
        raise ValueError("refinement needs at least one iteration")
    t0 = time.perf_counter()
    init = predicted_vfns(model, inst)
    t1 = time.perf_counter()
    res = sddp_solve(inst, init, n_iters=n_refine, m=m, J=1, seed=seed,
                     stop=StoppingRule(stall_iters=n_refine + 1))
    t2 = time.perf_counter()
    st = evaluate_policy(inst, res.vfns, n_traj, eval_seed)
    return InferenceResult(
        instance=inst.name, mode="accurate", costs=st.costs, actions=[], mean=st.mean, std=st.std,
        stderr=st.stderr, n_traj=n_traj, lp_solves=0,
        timings={"predict_ms": (t1 - t0) * 1e3, "refine_ms": (t2 - t1) * 1e3, "total_ms": (t2 - t0) * 1e3},
        lower_bound=res.lower_bound, vfns=res.vfns,
    )
