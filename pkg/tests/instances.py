"""Small instances shared by several test modules."""
import numpy as np

from nusddp.environments import InventoryConfig, make_inventory_instance
from nusddp.msso import sample_scenarios


def tiny_inventory(rng, C=None, T=None, m=None):
    """Random 1-1-C inventory instance with its discretized scenario batch."""
    C = C or int(rng.choice([1, 2]))
    T = T or int(rng.choice([2, 3]))
    m = m or int(rng.choice([2, 3]))
    cfg = InventoryConfig(S=1, I=1, C=C, T=T, domain="joint", constants_seed=int(rng.integers(2**31)),
                          name=f"tiny-{C}-{T}")
    inst = make_inventory_instance(cfg, seed=int(rng.integers(2**31)))
    return inst, sample_scenarios(inst, m, seed=int(rng.integers(2**31)))


def probe_points(inst, t, n, rng):
    """Random nonnegative decisions with stock inside the capacity box."""
    d = inst.stages[t].dim
    lay = inst.meta["layout"]
    X = rng.uniform(0, 30, size=(n, d))
    w0 = lay["w"][0]
    X[:, w0:] = rng.uniform(0, 60, size=(n, d - w0))
    return X
