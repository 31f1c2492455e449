"""Experiment harness: baselines, error ratios, training/evaluation runs and sweeps.

Every run writes its numeric results to ``metrics.csv`` and wall-times to a
separate ``timings.csv``, so the metrics file is bit-identical across reruns
with the same master seed.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .environments import InventoryConfig, InventoryFamily, PortfolioFamily, load_env_config
from .inference import fast_infer, refine
from .msso import ProblemInstance, StageInfeasible, evaluate_policy, rollout, sample_paths
from .neural import (SharedProjection, TrainConfig, TrainingRecord, meta_train, save_dataset,
                     solve_record)
from .sddp import StoppingRule, sddp_solve, write_bound_history

log = logging.getLogger(__name__)

METRIC_FIELDS = ["instance", "method", "mean_cost", "std_cost", "stderr", "error_ratio"]
TIMING_FIELDS = ["instance", "method", "wall_ms"]
SEED_BLOCK = 100_000
OUT_ENV = "NUSDDP_OUT"
# SGD steps over the whole dataset after the last training epoch
DEFAULT_FINAL_STEPS = 16_000


def error_ratio(candidate_mean: float, optimal_mean: float) -> float:
    """Relative excess cost over the optimal policy; positive is worse."""
    if optimal_mean == 0:
        raise ZeroDivisionError("error ratio is undefined for a zero optimal mean")
    return (candidate_mean - optimal_mean) / abs(optimal_mean)


@dataclass
class MetricRow:
    instance: str
    method: str
    mean_cost: float
    std_cost: float
    stderr: float
    error_ratio: float = float("nan")
    wall_ms: float = float("nan")


@dataclass
class ExperimentConfig:
    family: str = "inventory.sml-sht-mean"
    env_path: str | None = None
    n_clusters: int | None = None
    overrides: dict = field(default_factory=dict)
    n_train: int = 200
    n_val: int = 5
    n_test: int = 30
    sddp_m: int = 20
    sddp_iters: int = 300
    stall_iters: int = 5
    stall_tol: float = 1e-5
    train: TrainConfig = field(default_factory=lambda: TrainConfig(final_steps=DEFAULT_FINAL_STEPS))
    n_traj: int = 50
    n_refine: int = 10
    methods: tuple = ("sddp-optimal", "sddp-mean", "fast", "accurate")
    out_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        for name in ("n_train", "n_val", "n_test"):
            if not 1 <= getattr(self, name) < SEED_BLOCK:
                raise ValueError(f"{name} must lie in [1, {SEED_BLOCK})")
        self.methods = tuple(self.methods)

    @property
    def stop(self) -> StoppingRule:
        return StoppingRule(stall_iters=self.stall_iters, stall_tol=self.stall_tol)

    def split_seeds(self) -> dict:
        """Disjoint seed ranges per split, offset by the master seed."""
        base = 3 * SEED_BLOCK * (self.seed + 1)
        return {"train": [base + i for i in range(self.n_train)],
                "val": [base + SEED_BLOCK + i for i in range(self.n_val)],
                "test": [base + 2 * SEED_BLOCK + i for i in range(self.n_test)]}

    def output_dir(self) -> Path | None:
        out = os.environ.get(OUT_ENV) or self.out_dir
        return Path(out) if out else None

    def make_family(self):
        cfg = load_env_config(self.family, self.env_path)
        if self.overrides:
            cfg = dataclasses.replace(cfg, **self.overrides)
        if isinstance(cfg, InventoryConfig):
            return InventoryFamily(cfg, self.n_clusters)
        return PortfolioFamily(cfg)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def instance_seed(name_seed: int, salt: int) -> int:
    """Per-instance seed for solver or evaluation randomness."""
    return int(np.random.SeedSequence([name_seed, salt]).generate_state(1)[0])


def write_manifest(cfg: ExperimentConfig, out: Path, extra=None) -> None:
    doc = {"config": cfg.to_dict(), "seeds": cfg.split_seeds(),
           "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
           "optimal": f"SDDP until the lower bound gains <= {cfg.stall_tol:g} (relative) over "
                      f"{cfg.stall_iters} iterations, at most {cfg.sddp_iters} iterations"}
    doc.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, default=str))


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({"instance": r.instance, "method": r.method, "mean_cost": repr(float(r.mean_cost)),
                        "std_cost": repr(float(r.std_cost)), "stderr": repr(float(r.stderr)),
                        "error_ratio": repr(float(r.error_ratio))})


def write_timings(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({"instance": r.instance, "method": r.method, "wall_ms": f"{r.wall_ms:.3f}"})


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return [MetricRow(r["instance"], r["method"], float(r["mean_cost"]), float(r["std_cost"]),
                          float(r["stderr"]), float(r["error_ratio"])) for r in csv.DictReader(fh)]


def summarize(rows, methods=None) -> dict:
    """Mean and standard error of the error ratio per method."""
    out = {}
    for m in methods or sorted({r.method for r in rows}):
        phis = np.array([r.error_ratio for r in rows if r.method == m])
        if phis.size == 0:
            continue
        se = phis.std(ddof=1) / np.sqrt(phis.size) if phis.size > 1 else 0.0
        out[m] = {"mean_phi": float(phis.mean()), "stderr_phi": float(se), "n": int(phis.size)}
    return out


def paired_stderr(rows, a: str, b: str) -> float:
    """Standard error of the per-instance difference phi(a) - phi(b)."""
    pa = {r.instance: r.error_ratio for r in rows if r.method == a}
    pb = {r.instance: r.error_ratio for r in rows if r.method == b}
    keys = sorted(set(pa) & set(pb))
    diff = np.array([pa[k] - pb[k] for k in keys])
    return float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0


# ----------------------------------------------------------------------------
# building blocks


def solve_optimal(inst: ProblemInstance, cfg: ExperimentConfig, seed: int):
    t0 = time.perf_counter()
    res = sddp_solve(inst, n_iters=cfg.sddp_iters, m=cfg.sddp_m, J=1, seed=seed, stop=cfg.stop)
    return res, (time.perf_counter() - t0) * 1e3


def run_baseline_sddp_mean(family, cfg: ExperimentConfig):
    """Converged cuts of the instance at the meta-distribution means."""
    inst = family.mean_instance()
    res, _ = solve_optimal(inst, cfg, instance_seed(cfg.seed, 17))
    log.info("SDDP-mean solved in %d iterations (bound %.6g)", res.iterations, res.lower_bound)
    return res.vfns


@dataclass
class TestInstance:
    seed: int
    inst: ProblemInstance
    eval_seed: int
    optimal: "object" = None
    optimal_ms: float = float("nan")
    optimal_eval: "object" = None


@dataclass
class Prepared:
    """Artifacts shared by an experiment and the sweeps built on it."""

    cfg: ExperimentConfig
    family: object
    val_records: list
    tests: list
    mean_vfns: list = None
    rows: list = field(default_factory=list)


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Solve the validation split and the SDDP-optimal and SDDP-mean baselines on the test split."""
    family = cfg.make_family()
    seeds = cfg.split_seeds()
    tcfg = dataclasses.replace(cfg.train, sddp_m=cfg.sddp_m, sddp_iters=cfg.sddp_iters,
                               stall_iters=cfg.stall_iters, stall_tol=cfg.stall_tol)
    val = []
    for s in seeds["val"]:
        try:
            val.append(solve_record(family.instance(s), None, tcfg, seed=instance_seed(s, 1))[0])
        except StageInfeasible as exc:
            log.warning("validation instance %d skipped: %s", s, exc)
    prep = Prepared(cfg, family, val, [])
    for s in seeds["test"]:
        inst = family.instance(s)
        ti = TestInstance(s, inst, instance_seed(s, 3))
        try:
            ti.optimal, ti.optimal_ms = solve_optimal(inst, cfg, instance_seed(s, 2))
            ti.optimal_eval = evaluate_policy(inst, ti.optimal.vfns, cfg.n_traj, ti.eval_seed)
        except StageInfeasible as exc:
            log.warning("test instance %s skipped: %s", inst.name, exc)
            continue
        if ti.optimal_eval.mean == 0:
            log.warning("test instance %s has zero optimal mean; excluded", inst.name)
            continue
        prep.tests.append(ti)
        prep.rows.append(MetricRow(inst.name, "sddp-optimal", ti.optimal_eval.mean, ti.optimal_eval.std,
                                   ti.optimal_eval.stderr, 0.0, ti.optimal_ms))
    if "sddp-mean" in cfg.methods:
        t0 = time.perf_counter()
        prep.mean_vfns = run_baseline_sddp_mean(family, cfg)
        mean_ms = (time.perf_counter() - t0) * 1e3
        for ti in prep.tests:
            st = evaluate_policy(ti.inst, prep.mean_vfns, cfg.n_traj, ti.eval_seed)
            prep.rows.append(MetricRow(ti.inst.name, "sddp-mean", st.mean, st.std, st.stderr,
                                       error_ratio(st.mean, ti.optimal_eval.mean), mean_ms))
    return prep


def train_model(prep: Prepared, train_cfg: TrainConfig | None = None):
    cfg = prep.cfg
    tcfg = dataclasses.replace(train_cfg or cfg.train, sddp_m=cfg.sddp_m, sddp_iters=cfg.sddp_iters,
                               stall_iters=cfg.stall_iters, stall_tol=cfg.stall_tol)
    return meta_train(prep.family, tcfg, cfg.n_train, seed=instance_seed(cfg.seed, 5),
                      train_seeds=cfg.split_seeds()["train"], val_records=prep.val_records)


def fit_projection(dataset, p: int, train_cfg: TrainConfig, seed) -> SharedProjection:
    """Replay the per-epoch projection updates of training for another rank ``p``."""
    proj = SharedProjection(dataset[0].actions[0].shape[1], p, seed=seed, mode=train_cfg.proj_mode,
                            lr=train_cfg.proj_lr)
    for e in range(len(dataset)):
        pooled = np.vstack([a for r in dataset[max(0, e - 7):e + 1] for a in r.actions])
        for _ in range(train_cfg.proj_steps):
            proj.update(pooled)
    return proj


def evaluate_fast(prep: Prepared, model, G, method="fast") -> list:
    rows = []
    for ti in prep.tests:
        res = fast_infer(model, G, ti.inst, prep.cfg.n_traj, ti.eval_seed)
        if res.unusable or not res.costs.size:
            phi, mean = float("inf"), float("nan")
        else:
            mean = res.mean
            phi = error_ratio(mean, ti.optimal_eval.mean)
        rows.append(MetricRow(ti.inst.name, method, mean, res.std, res.stderr, phi, res.timings["total_ms"]))
    return rows


def evaluate_accurate(prep: Prepared, model, method="accurate") -> list:
    rows = []
    cfg = prep.cfg
    for ti in prep.tests:
        res = refine(model, ti.inst, cfg.n_refine, cfg.sddp_m, instance_seed(ti.seed, 4), cfg.n_traj, ti.eval_seed)
        rows.append(MetricRow(ti.inst.name, method, res.mean, res.std, res.stderr,
                              error_ratio(res.mean, ti.optimal_eval.mean), res.timings["total_ms"]))
    return rows


# ----------------------------------------------------------------------------
# top-level runs


@dataclass
class ExperimentResult:
    rows: list
    summary: dict
    model: object = None
    projection: object = None
    dataset: list = None
    prepared: Prepared = None
    files: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, prepared: Prepared | None = None) -> ExperimentResult:
    """Baselines, meta-training and fast/accurate inference on the test split."""
    out = cfg.output_dir()
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, out)
    prep = prepared or prepare(cfg)
    rows = list(prep.rows)
    trained = train_model(prep)
    G = trained.G
    if "fast" in cfg.methods:
        rows += evaluate_fast(prep, trained.model, G)
    if "accurate" in cfg.methods:
        rows += evaluate_accurate(prep, trained.model)
    summary = summarize(rows)
    result = ExperimentResult(rows, summary, trained.model, trained.projection, trained.dataset, prep)
    if out:
        write_metrics(rows, out / "metrics.csv")
        write_timings(rows, out / "timings.csv")
        bounds = out / "bounds"
        bounds.mkdir(exist_ok=True)
        for ti in prep.tests:
            write_bound_history(ti.optimal.bound_rows, bounds / f"{ti.inst.name}.csv")
        save_dataset(trained.dataset, out / "dataset.jsonl")
        trained.model.save(out / "model.npz")
        np.save(out / "projection.npy", G)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        result.files = {k: str(out / v) for k, v in [("metrics", "metrics.csv"), ("timings", "timings.csv"),
                                                      ("dataset", "dataset.jsonl"), ("model", "model.npz"),
                                                      ("projection", "projection.npy"), ("bounds", "bounds")]}
    for m, s in summary.items():
        log.info("%-14s mean phi %.4f +- %.4f (n=%d)", m, s["mean_phi"], s["stderr_phi"], s["n"])
    return result


def _dedupe(values, what):
    seen, out = set(), []
    for v in values:
        if v in seen:
            log.warning("duplicate %s %s ignored", what, v)
            continue
        seen.add(v)
        out.append(v)
    return out


def sweep_num_cuts(cfg: ExperimentConfig, K_list, prepared: Prepared | None = None) -> dict:
    """Train one model per cut count and evaluate fast inference on the test split."""
    prep = prepared or prepare(cfg)
    results = {}
    rows = []
    for K in _dedupe([int(k) for k in K_list], "K"):
        trained = train_model(prep, dataclasses.replace(cfg.train, K=K))
        r = evaluate_fast(prep, trained.model, trained.G, method=f"fast-K{K}")
        rows += r
        results[K] = summarize(r)[f"fast-K{K}"]
    _write_sweep(cfg, "sweep_cuts", prep.rows + rows)
    return {"per_K": results, "rows": rows, "baselines": summarize(prep.rows)}


def sweep_projection_rank(cfg: ExperimentConfig, p_list, prepared: Prepared | None = None) -> dict:
    """Fast inference at several projection ranks.

    The network loss does not involve ``G``, so one model is trained and the
    projection is refit per rank by replaying the training-time updates.
    """
    prep = prepared or prepare(cfg)
    trained = train_model(prep)
    results, rows = {}, []
    for p in _dedupe([int(p) for p in p_list], "rank"):
        proj = fit_projection(trained.dataset, p, cfg.train, instance_seed(cfg.seed, 100 + p))
        r = evaluate_fast(prep, trained.model, proj.G, method=f"fast-p{p}")
        rows += r
        results[p] = summarize(r)[f"fast-p{p}"]
    _write_sweep(cfg, "sweep_rank", prep.rows + rows)
    return {"per_p": results, "rows": rows, "baselines": summarize(prep.rows), "model": trained.model,
            "dataset": trained.dataset}


def timing_report(cfg: ExperimentConfig, n_list=(1, 2, 5, 10, 20), prepared: Prepared | None = None,
                  trained=None) -> dict:
    """Wall-time against error ratio for SDDP-n, SDDP-mean, fast and accurate inference.

    ``forward_ms`` is the time of one SDDP forward pass over the same
    evaluation paths under the converged cuts, the reference for fast
    inference.
    """
    prep = prepared or prepare(cfg)
    trained = trained or train_model(prep)
    rows = [r for r in prep.rows if r.method in ("sddp-optimal", "sddp-mean")]
    for n in _dedupe([int(n) for n in n_list], "iteration count"):
        for ti in prep.tests:
            t0 = time.perf_counter()
            res = sddp_solve(ti.inst, n_iters=n, m=cfg.sddp_m, J=1, seed=instance_seed(ti.seed, 2),
                             stop=StoppingRule(stall_iters=n + 1))
            ms = (time.perf_counter() - t0) * 1e3
            st = evaluate_policy(ti.inst, res.vfns, cfg.n_traj, ti.eval_seed)
            rows.append(MetricRow(ti.inst.name, f"sddp-{n}", st.mean, st.std, st.stderr,
                                  error_ratio(st.mean, ti.optimal_eval.mean), ms))
    rows += evaluate_fast(prep, trained.model, trained.G)
    rows += evaluate_accurate(prep, trained.model)
    for ti in prep.tests:
        paths = sample_paths(ti.inst, cfg.n_traj, ti.eval_seed)
        t0 = time.perf_counter()
        for j in range(cfg.n_traj):
            rollout(ti.inst, ti.optimal.vfns, paths[j], trajectory=j)
        rows.append(MetricRow(ti.inst.name, "forward-pass", float("nan"), float("nan"), float("nan"),
                              float("nan"), (time.perf_counter() - t0) * 1e3))
    table = {}
    for m in dict.fromkeys(r.method for r in rows):
        sel = [r for r in rows if r.method == m]
        phis = np.array([r.error_ratio for r in sel])
        table[m] = {"wall_ms": float(np.mean([r.wall_ms for r in sel])),
                    "mean_phi": float(np.mean(phis)) if m != "forward-pass" else float("nan"),
                    "stderr_phi": float(phis.std(ddof=1) / np.sqrt(phis.size)) if phis.size > 1 else 0.0}
    out = cfg.output_dir()
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "timing_report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "wall_ms", "mean_phi", "stderr_phi"])
            for m, v in table.items():
                w.writerow([m, f"{v['wall_ms']:.3f}", repr(v["mean_phi"]), repr(v["stderr_phi"])])
    return {"table": table, "rows": rows}


def _write_sweep(cfg, name, rows):
    out = cfg.output_dir()
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(rows, out / f"{name}.csv")
        write_timings(rows, out / f"{name}_timings.csv")
