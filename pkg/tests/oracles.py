"""Independent reference computations used by the tests.

Nothing here calls the package's own solvers: LPs go through brute-force
vertex enumeration or scipy's HiGHS, EMD through exhaustive search.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog


def random_standard_lp(rng, n=None, m=None):
    """Feasible, bounded ``min c.x, A x = b, x >= 0`` with ``n <= 6``, ``m <= 4``."""
    n = n or int(rng.integers(2, 7))
    m = m or int(rng.integers(1, min(4, n) + 1))
    A = rng.integers(-4, 5, size=(m, n)).astype(float)
    x_feas = rng.integers(0, 4, size=n) * (rng.random(n) < 0.7)
    b = A @ x_feas
    # c = A^T y + r with r >= 0 keeps the dual feasible, so the LP is bounded
    y = rng.integers(-3, 4, size=m).astype(float)
    r = rng.integers(0, 4, size=n).astype(float)
    c = A.T @ y + r
    return c, A, b


def enumerate_bfs(c, A, b, tol=1e-9):
    """Optimal value over all basic feasible solutions of ``A x = b, x >= 0``.

    Returns ``(value, x)`` or ``(inf, None)`` when no basic feasible solution exists.
    """
    m, n = A.shape
    rank = np.linalg.matrix_rank(A)
    # drop redundant rows so bases have ``rank`` columns
    rows = []
    for i in range(m):
        cand = rows + [i]
        if np.linalg.matrix_rank(A[cand]) == len(cand):
            rows = cand
    if len(rows) < m:
        if np.linalg.matrix_rank(np.column_stack([A, b])) > rank:
            return np.inf, None
        A, b = A[rows], b[rows]
    best, best_x = np.inf, None
    k = A.shape[0]
    if k == 0:
        x = np.zeros(n)
        return float(c @ x), x
    for cols in itertools.combinations(range(n), k):
        Bm = A[:, cols]
        if abs(np.linalg.det(Bm)) < 1e-12:
            continue
        xb = np.linalg.solve(Bm, b)
        if np.all(xb >= -tol):
            x = np.zeros(n)
            x[list(cols)] = np.maximum(xb, 0.0)
            v = float(c @ x)
            if v < best:
                best, best_x = v, x
    return best, best_x


def highs(c, A_eq=None, b_eq=None, A_ge=None, b_ge=None, nonneg=None):
    """scipy HiGHS solve of the package's LP form; returns the scipy result."""
    n = len(c)
    nonneg = np.ones(n, dtype=bool) if nonneg is None else np.asarray(nonneg, dtype=bool)
    bounds = [(0, None) if nn else (None, None) for nn in nonneg]
    A_ub = None if A_ge is None or len(A_ge) == 0 else -np.asarray(A_ge)
    b_ub = None if A_ub is None else -np.asarray(b_ge)
    A_e = None if A_eq is None or len(A_eq) == 0 else np.asarray(A_eq)
    b_e = None if A_e is None else np.asarray(b_eq)
    return linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_e, b_eq=b_e, bounds=bounds, method="highs",
                   options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})


def extensive_form_value(inst, samples, x_prev=None, start=0, vfn_terminal=True):
    """Optimal expected cost of stages ``start..T-1`` on the stagewise-independent tree.

    ``samples[t]`` lists the equally likely observations of stage ``t``; the
    first stage of the subtree (``start``) branches over ``samples[start]``
    unless ``start == 0``, where the root uses ``samples[0][0]``.  Returns
    ``inf`` when the subtree is infeasible.
    """
    T = inst.T
    x_prev = inst.x0 if x_prev is None else np.asarray(x_prev, dtype=float)
    nodes = []          # (stage, parent node index or -1, probability, xi)
    frontier = [(-1, 1.0)]
    for t in range(start, T):
        obs = [samples[0][0]] if t == 0 else list(samples[t])
        new = []
        for parent, prob in frontier:
            for xi in obs:
                nodes.append((t, parent, prob / len(obs), xi))
                new.append((len(nodes) - 1, prob / len(obs)))
        frontier = new
    dims = [inst.dims()[t] for t, *_ in nodes]
    offs = np.concatenate([[0], np.cumsum(dims)])
    N = int(offs[-1])
    c = np.zeros(N)
    nonneg = np.ones(N, dtype=bool)
    eq_rows, eq_rhs, ge_rows, ge_rhs = [], [], [], []
    for i, (t, parent, prob, xi) in enumerate(nodes):
        data = inst.stage_data(t, xi)
        sl = slice(offs[i], offs[i + 1])
        c[sl] = prob * data.c
        if data.nonneg is not None:
            nonneg[sl] = data.nonneg
        for A, B, b, rows, rhs in ((data.A, data.B, data.b, eq_rows, eq_rhs),
                                   (data.A_ge, data.B_ge, data.b_ge, ge_rows, ge_rhs)):
            for r in range(A.shape[0]):
                row = np.zeros(N)
                row[sl] = A[r]
                if parent < 0:
                    rhs.append(b[r] - B[r] @ x_prev)
                else:
                    row[offs[parent]:offs[parent + 1]] += B[r]
                    rhs.append(b[r])
                rows.append(row)
    res = highs(c, np.array(eq_rows) if eq_rows else None, np.array(eq_rhs),
                np.array(ge_rows) if ge_rows else None, np.array(ge_rhs), nonneg)
    if res.status == 2:
        return np.inf
    if res.status != 0:
        raise RuntimeError(f"extensive form not solved: {res.message}")
    return float(res.fun)


def cost_to_go(inst, samples, t, x):
    """Expected optimal cost of stages ``t+1..T-1`` given ``x_t = x`` on the sampled tree."""
    if t >= inst.T - 1:
        return 0.0
    return extensive_form_value(inst, samples, x_prev=x, start=t + 1)


def brute_force_emd(A, B, weights=None):
    """Minimum over all injective matchings of the smaller set into the larger."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    w = np.ones(A.shape[1]) if weights is None else np.asarray(weights)
    swap = A.shape[0] > B.shape[0]
    small, large = (B, A) if swap else (A, B)
    best = np.inf
    for perm in itertools.permutations(range(large.shape[0]), small.shape[0]):
        d = small - large[list(perm)]
        best = min(best, float(np.sum(d * d * w)))
    return best
