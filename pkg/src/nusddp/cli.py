"""Command-line driver: ``python -m nusddp <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .cuts import ValueFunctionApprox
from .environments import make_family
from .inference import fast_infer, refine, write_inference_csv
from .msso import ProblemInstance, evaluate_policy
from .neural import MaxAffinePredictor, TrainConfig, meta_train, save_dataset
from .sddp import StoppingRule, sddp_solve, write_bound_history

log = logging.getLogger("nusddp")


def _experiment_config(args) -> bench.ExperimentConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    for flag, key in [("family", "family"), ("n_train", "n_train"), ("n_val", "n_val"), ("n_test", "n_test"),
                      ("n_traj", "n_traj"), ("seed", "seed"), ("out_dir", "out_dir"), ("clusters", "n_clusters"),
                      ("env_config", "env_path")]:
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    train = dict(base.get("train", {}))
    for flag in ("K", "p", "lr", "inner_steps", "final_steps"):
        v = getattr(args, flag, None)
        if v is not None:
            train[flag] = v
    base["train"] = train
    return bench.ExperimentConfig.from_dict(base)


def _add_experiment_flags(p):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--family", help="environment section, e.g. inventory.sml-sht-mean")
    p.add_argument("--env-config", help="INI file with environment sections")
    p.add_argument("--clusters", type=int, help="customer clusters for inventory families")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-traj", type=int)
    p.add_argument("--K", type=int, help="predicted cuts per stage")
    p.add_argument("--p", type=int, help="projection rank")
    p.add_argument("--lr", type=float)
    p.add_argument("--inner-steps", type=int)
    p.add_argument("--final-steps", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir", help=f"output directory (overridden by ${bench.OUT_ENV})")


def _out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args):
    fam = make_family(args.family, args.env_config, args.clusters)
    out = _out(args.out_dir)
    for i in range(args.count):
        seed = args.seed + i
        inst = fam.instance(seed)
        inst.save(out / f"{inst.name}.json")
    if args.mean:
        fam.mean_instance().save(out / f"{fam.name}-mean.json")
    print(f"wrote {args.count + int(args.mean)} instances to {out}")


def cmd_solve(args):
    inst = ProblemInstance.load(args.instance)
    out = _out(args.out_dir)
    res = sddp_solve(inst, n_iters=args.iters, m=args.m, J=args.J, seed=args.seed,
                     stop=StoppingRule(stall_iters=args.stall_iters, stall_tol=args.stall_tol,
                                       ub_every=args.ub_every, ub_traj=args.n_traj))
    write_bound_history(res.bound_rows, out / "bounds.csv")
    (out / "cuts.json").write_text(json.dumps({"vfns": [v.to_dict() for v in res.vfns]}))
    st = evaluate_policy(inst, res.vfns, args.n_traj, args.seed)
    summary = {"instance": inst.name, "iterations": res.iterations, "reason": res.reason,
               "lower_bound": res.lower_bound, "mean_cost": st.mean, "stderr": st.stderr, "wall_ms": res.wall_ms}
    (out / "solve.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))


def cmd_train(args):
    cfg = _experiment_config(args)
    out = _out(cfg.output_dir() or args.out_dir or "train-out")
    bench.write_manifest(cfg, out)
    fam = cfg.make_family()
    tcfg = dataclasses.replace(cfg.train, sddp_m=cfg.sddp_m, sddp_iters=cfg.sddp_iters,
                               stall_iters=cfg.stall_iters, stall_tol=cfg.stall_tol)
    seeds = cfg.split_seeds()
    from .neural import solve_record
    val = [solve_record(fam.instance(s), None, tcfg, seed=bench.instance_seed(s, 1))[0] for s in seeds["val"]]
    res = meta_train(fam, tcfg, cfg.n_train, seed=bench.instance_seed(cfg.seed, 5), train_seeds=seeds["train"],
                     val_records=val)
    res.model.save(out / "model.npz")
    np.save(out / "projection.npy", res.G)
    save_dataset(res.dataset, out / "dataset.jsonl")
    (out / "history.json").write_text(json.dumps(res.history, indent=1, default=float))
    print(f"trained on {len(res.dataset)} instances; best validation EMD {res.best_val:.6g}; saved to {out}")


def cmd_infer(args):
    model = MaxAffinePredictor.load(args.model)
    G = np.load(args.projection) if args.projection else None
    results = []
    for path in args.instance:
        inst = ProblemInstance.load(path)
        if args.mode == "fast":
            r = fast_infer(model, G, inst, args.n_traj, args.seed)
        else:
            r = refine(model, inst, args.n_refine, args.m, args.seed, args.n_traj, args.seed)
        results.append(r)
        print(f"{inst.name}: {r.mode} mean cost {r.mean:.6g} (stderr {r.stderr:.3g}, dropped {r.n_dropped})")
    if args.out:
        write_inference_csv(results, args.out)


def cmd_evaluate(args):
    cfg = _experiment_config(args)
    res = bench.run_experiment(cfg)
    print(json.dumps(res.summary, indent=2))
    return 0 if res.summary else 1


def cmd_sweep_cuts(args):
    cfg = _experiment_config(args)
    res = bench.sweep_num_cuts(cfg, args.values)
    print(json.dumps({"per_K": res["per_K"], "baselines": res["baselines"]}, indent=2))


def cmd_sweep_rank(args):
    cfg = _experiment_config(args)
    res = bench.sweep_projection_rank(cfg, args.values)
    print(json.dumps({"per_p": res["per_p"], "baselines": res["baselines"]}, indent=2))


def cmd_timing(args):
    cfg = _experiment_config(args)
    res = bench.timing_report(cfg, args.values)
    for m, v in res["table"].items():
        print(f"{m:14s} {v['wall_ms']:12.2f} ms   phi {v['mean_phi']:.4f} +- {v['stderr_phi']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nusddp", description="SDDP with learned value-function warm starts")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample instances from an environment family")
    p.add_argument("--family", required=True)
    p.add_argument("--env-config", help="INI file with environment sections")
    p.add_argument("--clusters", type=int)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean", action="store_true", help="also write the mean-context instance")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="solve one instance with SDDP")
    p.add_argument("--instance", required=True)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--J", type=int, default=1)
    p.add_argument("--stall-iters", type=int, default=5)
    p.add_argument("--stall-tol", type=float, default=1e-5)
    p.add_argument("--ub-every", type=int, default=0)
    p.add_argument("--n-traj", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="meta-train a value-function predictor")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="fast or refined inference with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--projection", help=".npy file holding G")
    p.add_argument("--instance", required=True, nargs="+")
    p.add_argument("--mode", choices=("fast", "accurate"), default="fast")
    p.add_argument("--n-traj", type=int, default=50)
    p.add_argument("--n-refine", type=int, default=10)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV of inference results")
    p.set_defaults(func=cmd_infer)

    for name, func, help_, default in [
        ("evaluate", cmd_evaluate, "full experiment: baselines, training, inference", None),
        ("sweep-cuts", cmd_sweep_cuts, "fast inference quality against the cut count K", [8, 64]),
        ("sweep-rank", cmd_sweep_rank, "fast inference quality against the projection rank p", [1, 8, 36, 52]),
        ("timing", cmd_timing, "wall-time against quality for SDDP-n and the learned methods", [1, 2, 5, 10, 20]),
    ]:
        p = sub.add_parser(name, help=help_)
        _add_experiment_flags(p)
        if default is not None:
            p.add_argument("--values", type=int, nargs="+", default=default)
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    rc = args.func(args)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
