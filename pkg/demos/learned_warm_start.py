"""Train a small cut predictor and compare it with plain SDDP on held-out instances.

Run with ``python3 demos/learned_warm_start.py``.  A reduced setting
(40 training instances, 5 test instances) takes several minutes.
"""
import logging

from nusddp import bench
from nusddp.neural import TrainConfig

logging.basicConfig(level=logging.INFO, format="%(name)s %(message)s")

cfg = bench.ExperimentConfig(family="inventory.sml-sht-mean", n_train=40, n_val=3, n_test=5,
                             train=TrainConfig(K=32), seed=1)

# baselines first: SDDP run to convergence on each test instance, and the
# cuts of the mean instance reused everywhere
prep = bench.prepare(cfg)
res = bench.run_experiment(cfg, prepared=prep)

print("\nerror ratio against converged SDDP (lower is better)")
for method, s in res.summary.items():
    print(f"  {method:14s} {s['mean_phi']:8.2%} +- {s['stderr_phi']:.2%}")

# fast inference is one forward pass with predicted cuts; accurate adds a
# handful of SDDP iterations started from the same cuts
fast = [r for r in res.rows if r.method == "fast"]
acc = [r for r in res.rows if r.method == "accurate"]
print(f"\nmean wall-time: fast {sum(r.wall_ms for r in fast) / len(fast):.0f} ms, "
      f"accurate {sum(r.wall_ms for r in acc) / len(acc):.0f} ms")
