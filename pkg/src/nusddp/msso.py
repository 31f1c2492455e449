"""Multi-stage stochastic linear programs with stagewise-independent noise.

Stage ``t`` (0-based here, 1-based in the usual notation) chooses
``x_t >= 0`` subject to::

    A_t x_t            = b_t    - B_t    x_{t-1}
    A_ge_t x_t        >= b_ge_t - B_ge_t x_{t-1}

with cost ``c_t^T x_t``.  Entries of any block may be overwritten by
components of the stage observation ``xi_t`` through :class:`Binding`.

Value functions are passed around as a list ``vfns`` of length ``T`` where
``vfns[t]`` approximates the expected cost-to-go of ``x_t``, i.e. it is the
function appended to stage ``t``'s LP.  ``vfns[T-1]`` is the zero function.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cuts import Cut, ValueFunctionApprox
from .lp import LinearProgram, LPStatus, solve_lp

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_VECTOR_BLOCKS = ("c", "b", "b_ge")
_MATRIX_BLOCKS = ("A", "B", "A_ge", "B_ge")


class StageInfeasible(RuntimeError):
    def __init__(self, stage, trajectory=None, status=None):
        self.stage = stage
        self.trajectory = trajectory
        self.status = status
        where = f"stage {stage + 1}" + ("" if trajectory is None else f", trajectory {trajectory}")
        super().__init__(f"stage LP not solved to optimality ({status.value if status else '?'}) at {where}")


@dataclass(frozen=True)
class Binding:
    """Slot ``block[index]`` takes the value ``offset + scale * xi[source]``."""

    block: str
    index: tuple
    source: int
    scale: float = 1.0
    offset: float = 0.0

    def to_list(self):
        return [self.block, list(self.index), self.source, self.scale, self.offset]

    @classmethod
    def from_list(cls, v):
        return cls(v[0], tuple(int(i) for i in v[1]), int(v[2]), float(v[3]), float(v[4]))


@dataclass(frozen=True)
class StageData:
    c: np.ndarray
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    A_ge: np.ndarray
    B_ge: np.ndarray
    b_ge: np.ndarray
    nonneg: np.ndarray | None = None

    @property
    def dim(self):
        return self.c.shape[0]


@dataclass(eq=False)
class StageTemplate:
    c: np.ndarray
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    A_ge: np.ndarray = None
    B_ge: np.ndarray = None
    b_ge: np.ndarray = None
    bindings: tuple = ()

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        d = self.c.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(-1, d)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim != 2:
            self.B = self.B.reshape(self.A.shape[0], -1)
        d_prev = self.B.shape[1]
        self.A_ge = np.zeros((0, d)) if self.A_ge is None else np.asarray(self.A_ge, dtype=float).reshape(-1, d)
        self.b_ge = np.zeros(self.A_ge.shape[0]) if self.b_ge is None else np.asarray(self.b_ge, dtype=float).reshape(-1)
        self.B_ge = (np.zeros((self.A_ge.shape[0], d_prev)) if self.B_ge is None
                     else np.asarray(self.B_ge, dtype=float).reshape(-1, d_prev))
        self.bindings = tuple(self.bindings)
        if self.A.shape[0] != self.b.shape[0] or self.B.shape[0] != self.b.shape[0]:
            raise ValueError("equality block row counts disagree")
        if self.A_ge.shape[0] != self.b_ge.shape[0] or self.B_ge.shape[0] != self.b_ge.shape[0]:
            raise ValueError("inequality block row counts disagree")
        seen = set()
        for bd in self.bindings:
            arr = getattr(self, bd.block, None)
            if bd.block not in _VECTOR_BLOCKS + _MATRIX_BLOCKS:
                raise ValueError(f"unknown binding block {bd.block!r}")
            if len(bd.index) != arr.ndim or any(not 0 <= i < s for i, s in zip(bd.index, arr.shape)):
                raise ValueError(f"binding target {bd.block}{list(bd.index)} out of range")
            key = (bd.block, bd.index)
            if key in seen:
                raise ValueError(f"slot {bd.block}{list(bd.index)} bound twice")
            seen.add(key)

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    @property
    def prev_dim(self) -> int:
        return self.B.shape[1]

    @property
    def xi_dim(self) -> int:
        return 1 + max((bd.source for bd in self.bindings), default=-1)

    def to_dict(self):
        return {
            "c": self.c.tolist(), "A": self.A.tolist(), "B": self.B.tolist(), "b": self.b.tolist(),
            "A_ge": self.A_ge.tolist(), "B_ge": self.B_ge.tolist(), "b_ge": self.b_ge.tolist(),
            "d": self.dim, "d_prev": self.prev_dim,
            "bindings": [bd.to_list() for bd in self.bindings],
        }

    @classmethod
    def from_dict(cls, d):
        n, n_prev = d["d"], d["d_prev"]
        return cls(
            c=d["c"], A=np.asarray(d["A"], dtype=float).reshape(-1, n),
            B=np.asarray(d["B"], dtype=float).reshape(-1, n_prev), b=d["b"],
            A_ge=np.asarray(d["A_ge"], dtype=float).reshape(-1, n),
            B_ge=np.asarray(d["B_ge"], dtype=float).reshape(-1, n_prev), b_ge=d["b_ge"],
            bindings=[Binding.from_list(v) for v in d["bindings"]],
        )


def realize_stage(template: StageTemplate, xi) -> StageData:
    """Concrete stage data with observation components injected."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    out = {}
    touched = {bd.block for bd in template.bindings}
    for name in _VECTOR_BLOCKS + _MATRIX_BLOCKS:
        base = getattr(template, name)
        out[name] = base.copy() if name in touched else base
    for bd in template.bindings:
        if bd.source >= xi.shape[0]:
            raise IndexError(f"binding reads xi[{bd.source}] but xi has {xi.shape[0]} components")
        out[bd.block][bd.index] = bd.offset + bd.scale * xi[bd.source]
    return StageData(**out)


@dataclass(eq=False)
class ScenarioDistribution:
    """Per-stage componentwise Normal, truncated below at ``lower``.

    ``truncation="reject"`` resamples values below the bound;
    ``"clip"`` raises them to it.
    """

    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray = None
    truncation: str = "reject"

    def __post_init__(self):
        self.mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        self.std = np.broadcast_to(np.asarray(self.std, dtype=float), self.mean.shape).copy()
        k = self.mean.shape[1]
        self.lower = np.full(k, -np.inf) if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), (k,)).copy()
        if np.any(self.std < 0):
            raise ValueError("standard deviations must be nonnegative")
        if self.truncation not in ("reject", "clip"):
            raise ValueError(f"unknown truncation mode {self.truncation!r}")

    @property
    def stationary(self) -> bool:
        return bool(np.all(self.mean == self.mean[0]) and np.all(self.std == self.std[0]))

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def params(self, t):
        i = min(t, self.mean.shape[0] - 1)
        return self.mean[i], self.std[i]

    def sample(self, t, size, rng) -> np.ndarray:
        mu, sd = self.params(t)
        out = mu + sd * rng.standard_normal((size, mu.shape[0]))
        if self.truncation == "clip":
            return np.maximum(out, self.lower)
        bad = out < self.lower
        for _ in range(1000):
            if not bad.any():
                break
            rows, cols = np.nonzero(bad)
            out[rows, cols] = mu[cols] + sd[cols] * rng.standard_normal(rows.shape[0])
            bad = out < self.lower
        else:
            raise RuntimeError("rejection sampling failed to clear the truncation bound")
        return out

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "lower": [None if not np.isfinite(v) else v for v in self.lower.tolist()],
                "truncation": self.truncation}

    @classmethod
    def from_dict(cls, d):
        lower = np.array([-np.inf if v is None else v for v in d["lower"]], dtype=float)
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float), lower, d["truncation"])


@dataclass(eq=False)
class ProblemInstance:
    stages: list
    dist: ScenarioDistribution
    xi_1: np.ndarray
    context: np.ndarray
    x0: np.ndarray
    name: str = ""
    meta: dict = field(default_factory=dict)
    # lower bound on any single stage's cost; seeds the trivial value functions
    stage_cost_floor: float = 0.0

    def __post_init__(self):
        self.xi_1 = np.asarray(self.xi_1, dtype=float).reshape(-1)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        self.context = np.atleast_2d(np.asarray(self.context, dtype=float))
        if self.context.shape[0] != self.T:
            raise ValueError(f"context has {self.context.shape[0]} rows for {self.T} stages")
        if self.stages[0].prev_dim != self.x0.shape[0]:
            raise ValueError("x0 dimension does not match the first stage coupling")
        for t in range(1, self.T):
            if self.stages[t].prev_dim != self.stages[t - 1].dim:
                raise ValueError(f"stage {t + 1} couples to dimension {self.stages[t].prev_dim}, "
                                 f"previous stage has {self.stages[t - 1].dim}")
        for t, st in enumerate(self.stages):
            if st.xi_dim > self.dist.dim:
                raise ValueError(f"stage {t + 1} reads xi components beyond the distribution dimension")

    @property
    def T(self) -> int:
        return len(self.stages)

    def dims(self):
        return [st.dim for st in self.stages]

    def stage_data(self, t, xi) -> StageData:
        return realize_stage(self.stages[t], xi)

    def zero_vfns(self):
        return [ValueFunctionApprox.zero(st.dim) for st in self.stages]

    def initial_vfns(self):
        """Constant cuts at the cost floor of the remaining stages; zero at the end.

        Equals :meth:`zero_vfns` when stage costs are nonnegative.
        """
        T = self.T
        return [ValueFunctionApprox(st.dim, [Cut(np.zeros(st.dim), self.stage_cost_floor * (T - 1 - t))])
                for t, st in enumerate(self.stages)]

    def to_dict(self):
        return {
            "format": "nusddp.instance", "version": FORMAT_VERSION, "name": self.name, "T": self.T,
            "stages": [st.to_dict() for st in self.stages], "dist": self.dist.to_dict(),
            "xi_1": self.xi_1.tolist(), "context": self.context.tolist(), "x0": self.x0.tolist(),
            "meta": self.meta, "stage_cost_floor": self.stage_cost_floor,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "nusddp.instance":
            raise ValueError("not an instance document")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported instance format version {d.get('version')}")
        return cls(
            stages=[StageTemplate.from_dict(s) for s in d["stages"]],
            dist=ScenarioDistribution.from_dict(d["dist"]),
            xi_1=d["xi_1"], context=d["context"], x0=d["x0"], name=d["name"], meta=d["meta"],
            stage_cost_floor=d["stage_cost_floor"],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(eq=False)
class ScenarioBatch:
    """``samples[t, j]`` is observation ``j`` at stage ``t``; row 0 repeats ``xi_1``."""

    samples: np.ndarray
    seed: int | None = None

    @property
    def m(self) -> int:
        return self.samples.shape[1]

    @property
    def T(self) -> int:
        return self.samples.shape[0]


def sample_scenarios(inst: ProblemInstance, m: int, seed=None) -> ScenarioBatch:
    if m < 1:
        raise ValueError("sample count must be at least 1")
    rng = np.random.default_rng(seed)
    k = inst.dist.dim
    samples = np.empty((inst.T, m, k))
    samples[0] = inst.xi_1
    for t in range(1, inst.T):
        samples[t] = inst.dist.sample(t, m, rng)
    return ScenarioBatch(samples, seed)


def build_stage_lp(stage: StageData, x_prev, vfn: ValueFunctionApprox) -> LinearProgram:
    """Stage LP over ``(x_t, theta)`` with one ``>=`` row per cut of ``vfn``."""
    x_prev = np.asarray(x_prev, dtype=float).reshape(-1)
    if x_prev.shape[0] != stage.B.shape[1]:
        raise ValueError(f"x_prev has dimension {x_prev.shape[0]}, stage expects {stage.B.shape[1]}")
    d = stage.dim
    if vfn.dim != d:
        raise ValueError(f"value function dimension {vfn.dim} does not match stage dimension {d}")
    if len(vfn) == 0:
        raise ValueError("value function needs at least one cut")
    k = len(vfn)
    m_eq, m_env = stage.A.shape[0], stage.A_ge.shape[0]
    A_eq = np.zeros((m_eq, d + 1))
    A_eq[:, :d] = stage.A
    A_ge = np.zeros((m_env + k, d + 1))
    A_ge[:m_env, :d] = stage.A_ge
    A_ge[m_env:, :d] = -vfn.betas
    A_ge[m_env:, d] = 1.0
    b_ge = np.concatenate([stage.b_ge - stage.B_ge @ x_prev, vfn.alphas])
    nonneg = np.ones(d + 1, dtype=bool)
    if stage.nonneg is not None:
        nonneg[:d] = stage.nonneg
    nonneg[d] = False
    return LinearProgram(
        c=np.append(stage.c, 1.0), A_eq=A_eq, b_eq=stage.b - stage.B @ x_prev,
        A_ge=A_ge, b_ge=b_ge, nonneg=nonneg,
    )


@dataclass
class StageSolution:
    x: np.ndarray
    theta: float
    stage_cost: float
    objective: float
    dual_eq: np.ndarray
    dual_env: np.ndarray
    dual_cut: np.ndarray


def solve_stage(stage: StageData, x_prev, vfn, *, stage_index=0, trajectory=None) -> StageSolution:
    res = solve_lp(build_stage_lp(stage, x_prev, vfn))
    if res.status is not LPStatus.OPTIMAL:
        raise StageInfeasible(stage_index, trajectory, res.status)
    d = stage.dim
    m_env = stage.A_ge.shape[0]
    x = res.x[:d]
    return StageSolution(
        x=x, theta=float(res.x[d]), stage_cost=float(stage.c @ x), objective=res.objective,
        dual_eq=res.dual_eq, dual_env=res.dual_ge[:m_env], dual_cut=res.dual_ge[m_env:],
    )


@dataclass
class CostStats:
    mean: float
    std: float
    costs: np.ndarray
    actions: list = None

    @property
    def stderr(self) -> float:
        n = self.costs.shape[0]
        return self.std / np.sqrt(n) if n > 1 else 0.0


def rollout(inst, vfns, xis, *, trajectory=None, counter=None):
    """Act greedily along one observation path; returns (total cost, actions)."""
    x_prev = inst.x0
    total = 0.0
    actions = []
    for t in range(inst.T):
        sol = solve_stage(inst.stage_data(t, xis[t]), x_prev, vfns[t], stage_index=t, trajectory=trajectory)
        if counter is not None:
            counter[0] += 1
        total += sol.stage_cost
        actions.append(sol.x)
        x_prev = sol.x
    return total, actions


def sample_paths(inst, n_traj, seed):
    """Observation paths of shape ``(n_traj, T, k)``; stage 1 always uses ``xi_1``."""
    batch = sample_scenarios(inst, n_traj, seed)
    return np.swapaxes(batch.samples, 0, 1)


def cost_stats(costs, actions=None) -> CostStats:
    costs = np.asarray(costs, dtype=float)
    std = float(costs.std(ddof=1)) if costs.shape[0] > 1 else 0.0
    return CostStats(float(costs.mean()), std, costs, actions)


def evaluate_policy(inst, vfns, n_traj: int, seed=None, *, keep_actions=False) -> CostStats:
    """Mean and spread of realized cost when acting greedily w.r.t. ``vfns``."""
    if len(vfns) != inst.T:
        raise ValueError(f"need {inst.T} value functions, got {len(vfns)}")
    paths = sample_paths(inst, n_traj, seed)
    costs = np.empty(n_traj)
    acts = []
    for j in range(n_traj):
        costs[j], a = rollout(inst, vfns, paths[j], trajectory=j)
        if keep_actions:
            acts.append(a)
    return cost_stats(costs, acts if keep_actions else None)
