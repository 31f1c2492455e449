"""Solve one small inventory instance with SDDP and look at the bounds.

Run with ``python3 demos/sddp_inventory.py``.  Takes about half a minute.
"""
import logging

import numpy as np

from nusddp import InventoryConfig, StoppingRule, evaluate_policy, make_inventory_instance, sddp_solve

logging.basicConfig(level=logging.INFO, format="%(name)s %(message)s")

# two suppliers, two stores, four customers, five stages
inst = make_inventory_instance(InventoryConfig.sml_sht(), seed=0)
print(f"{inst.name}: T={inst.T}, decision dimension {inst.stages[0].dim}")

res = sddp_solve(inst, n_iters=300, m=20, seed=0, stop=StoppingRule(stall_iters=5, stall_tol=1e-5))
print(f"stopped after {res.iterations} iterations ({res.reason}); lower bound {res.lower_bound:.2f}")

# entry 0 is the bound of the initial cuts; it only moves up from there
lb = np.array(res.lb_history)
for k in sorted({0, 1, 5, 10, len(lb) - 1}):
    if k < len(lb):
        print(f"  after {k:3d} iterations: {lb[k]:10.2f}")

# out-of-sample rollouts give an estimate of the policy's true expected cost
st = evaluate_policy(inst, res.vfns, 200, seed=1)
print(f"policy cost over 200 fresh scenarios: {st.mean:.2f} +- {st.stderr:.2f}")
print(f"cuts per stage: {[len(v) for v in res.vfns]}")
