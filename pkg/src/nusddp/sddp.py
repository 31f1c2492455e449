"""Stochastic dual dynamic programming on a sampled scenario batch.

Each iteration runs a forward pass along randomly drawn sample paths, then a
backward pass that, at every trial point, solves the stage LP for all ``m``
samples and averages their duals into one cut for the preceding stage.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cuts import Cut, ValueFunctionApprox
from .msso import (ProblemInstance, ScenarioBatch, cost_stats, rollout, sample_paths,
                   sample_scenarios, solve_stage)

log = logging.getLogger(__name__)


@dataclass
class StoppingRule:
    """Stop on a small statistical gap or a stalled lower bound.

    The gap test needs an upper-bound estimate, which costs ``ub_traj``
    rollouts; it runs every ``ub_every`` iterations and is off when 0.
    """

    gap_tol: float = 1e-3
    stall_tol: float = 1e-7
    stall_iters: int = 5
    ub_every: int = 0
    ub_traj: int = 50
    min_iters: int = 1


@dataclass
class SddpState:
    vfns: list
    iteration: int = 0
    lb_history: list = field(default_factory=list)
    bound_rows: list = field(default_factory=list)
    trajectories: "Trajectories" = None


@dataclass
class Trajectories:
    paths: np.ndarray          # (J, T) sample index used at each stage
    x: list                    # x[t] has shape (J, d_t)
    objective: np.ndarray      # (J, T) stage LP objective incl. theta
    dual_eq: list
    dual_cut: list


@dataclass
class SddpResult:
    vfns: list
    actions: list              # actions[t] has shape (m, d_t)
    lower_bound: float
    iterations: int
    converged: bool
    reason: str
    lb_history: list
    bound_rows: list
    wall_ms: float = 0.0


def forward_pass(inst: ProblemInstance, state: SddpState, batch: ScenarioBatch, paths) -> Trajectories:
    """Solve stage LPs along each path; ``paths[j, t]`` indexes the batch sample at stage ``t``."""
    paths = np.atleast_2d(np.asarray(paths, dtype=int))
    J, T = paths.shape[0], inst.T
    xs = [np.empty((J, d)) for d in inst.dims()]
    obj = np.empty((J, T))
    duals, cduals = [[None] * J for _ in range(T)], [[None] * J for _ in range(T)]
    for j in range(J):
        x_prev = inst.x0
        for t in range(T):
            sol = solve_stage(inst.stage_data(t, batch.samples[t, paths[j, t]]), x_prev, state.vfns[t],
                              stage_index=t, trajectory=j)
            xs[t][j] = sol.x
            obj[j, t] = sol.objective
            duals[t][j] = sol.dual_eq
            cduals[t][j] = sol.dual_cut
            x_prev = sol.x
    traj = Trajectories(paths, xs, obj, duals, cduals)
    state.trajectories = traj
    return traj


def stage_cut(inst: ProblemInstance, t: int, x_prev, vfn: ValueFunctionApprox, samples) -> Cut:
    """Average of the per-sample supporting hyperplanes of stage ``t`` at ``x_prev``."""
    beta = np.zeros(inst.stages[t].prev_dim)
    alpha = 0.0
    for xi in samples:
        data = inst.stage_data(t, xi)
        sol = solve_stage(data, x_prev, vfn, stage_index=t)
        beta -= data.B.T @ sol.dual_eq + data.B_ge.T @ sol.dual_env
        alpha += data.b @ sol.dual_eq + data.b_ge @ sol.dual_env + vfn.alphas @ sol.dual_cut
    m = len(samples)
    return Cut(beta / m, alpha / m)


def backward_pass(inst: ProblemInstance, state: SddpState, batch: ScenarioBatch,
                  traj: Trajectories | None = None) -> SddpState:
    traj = traj or state.trajectories
    if traj is None:
        raise RuntimeError("backward pass needs a forward pass first")
    for t in range(inst.T - 1, 0, -1):
        for j in range(traj.paths.shape[0]):
            cut = stage_cut(inst, t, traj.x[t - 1][j], state.vfns[t], batch.samples[t])
            state.vfns[t - 1].add(cut)
    return state


def lower_bound(inst: ProblemInstance, vfns) -> float:
    return solve_stage(inst.stage_data(0, inst.xi_1), inst.x0, vfns[0]).objective


def upper_bound_estimate(inst: ProblemInstance, vfns, n_traj: int, seed=None, batch: ScenarioBatch | None = None):
    """Mean rollout cost and its standard error.

    With ``batch`` the paths are drawn from the sampled tree, otherwise from
    the instance distribution.  ``mean + 2 * stderr`` is the usual confidence
    upper bound.
    """
    if batch is None:
        paths = sample_paths(inst, n_traj, seed)
    else:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, batch.m, size=(n_traj, inst.T))
        paths = np.stack([batch.samples[np.arange(inst.T), idx[j]] for j in range(n_traj)])
    costs = [rollout(inst, vfns, paths[j], trajectory=j)[0] for j in range(n_traj)]
    st = cost_stats(costs)
    return {"mean": st.mean, "stderr": st.stderr}


def _with_guide(vfns, guide):
    return [ValueFunctionApprox.from_arrays(np.vstack([g.betas, v.betas]), np.concatenate([g.alphas, v.alphas]))
            for v, g in zip(vfns, guide)]


def sddp_solve(inst: ProblemInstance, init_vfns=None, n_iters: int = 100, m: int = 20, J: int = 1,
               seed=None, stop: StoppingRule | None = None, batch: ScenarioBatch | None = None,
               guide_vfns=None, guide_iters: int = 0) -> SddpResult:
    """Run SDDP from ``init_vfns`` (``inst.initial_vfns()`` when omitted).

    The initial value functions are copied, never mutated.  ``batch`` overrides
    the sampled scenarios, e.g. to solve a fixed tree.

    ``guide_vfns`` steers the forward passes of the first ``guide_iters``
    iterations: trial points come from the max of the guide and the current
    cuts, while cuts are still built on the current approximation only, so
    they stay valid even when the guide overestimates.  The stall test is
    held off until ``stop.stall_iters`` unguided iterations have run.
    """
    t0 = time.perf_counter()
    stop = stop or StoppingRule()
    rng = np.random.default_rng(seed)
    if batch is None:
        batch = sample_scenarios(inst, m, rng.integers(2**63))
    m = batch.m
    J = min(J, m) if J else m
    vfns = [v.copy() for v in (init_vfns or inst.initial_vfns())]
    if len(vfns) != inst.T:
        raise ValueError(f"need {inst.T} value functions, got {len(vfns)}")
    state = SddpState(vfns)
    lb = lower_bound(inst, vfns)
    state.lb_history.append(lb)
    if guide_vfns is None:
        guide_iters = 0
    elif len(guide_vfns) != inst.T:
        raise ValueError(f"need {inst.T} guide value functions, got {len(guide_vfns)}")
    min_iters = max(stop.min_iters, guide_iters + stop.stall_iters) if guide_iters else stop.min_iters
    converged, reason = False, "iteration limit"
    for i in range(1, n_iters + 1):
        paths = np.empty((J, inst.T), dtype=int)
        paths[:, 0] = 0
        for t in range(1, inst.T):
            paths[:, t] = rng.choice(m, size=J, replace=False)
        if i <= guide_iters:
            traj = forward_pass(inst, SddpState(_with_guide(vfns, guide_vfns)), batch, paths)
        else:
            traj = forward_pass(inst, state, batch, paths)
        backward_pass(inst, state, batch, traj)
        state.iteration = i
        lb = lower_bound(inst, vfns)
        state.lb_history.append(lb)
        row = {"iteration": i, "lower_bound": lb, "upper_mean": float("nan"), "upper_stderr": float("nan")}
        if stop.ub_every and i % stop.ub_every == 0:
            ub = upper_bound_estimate(inst, vfns, stop.ub_traj, rng.integers(2**63), batch=batch)
            row["upper_mean"], row["upper_stderr"] = ub["mean"], ub["stderr"]
            if i >= min_iters and (ub["mean"] + 2 * ub["stderr"] - lb) <= stop.gap_tol * abs(lb):
                converged, reason = True, "gap"
        state.bound_rows.append(row)
        if converged:
            break
        h = state.lb_history
        if i >= max(min_iters, stop.stall_iters) and \
                h[-1] - h[-1 - stop.stall_iters] <= stop.stall_tol * max(1.0, abs(h[-1])):
            converged, reason = True, "stall"
            break
    # final pass along the m diagonal paths: action j uses sample j at every stage
    final = forward_pass(inst, state, batch, np.tile(np.arange(m)[:, None], (1, inst.T)) * (np.arange(inst.T) > 0))
    return SddpResult(
        vfns=vfns, actions=final.x, lower_bound=lb, iterations=state.iteration, converged=converged,
        reason=reason, lb_history=state.lb_history, bound_rows=state.bound_rows,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def write_bound_history(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "lower_bound", "upper_mean", "upper_stderr"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if k != "iteration" else int(v) for k, v in r.items()})
