"""Dense linear programs solved by a two-phase revised simplex.

Problems are stated as::

    min  c^T x
    s.t. A_eq x  = b_eq
         A_ge x >= b_ge
         x_i >= 0   where nonneg[i], free otherwise

and the solver returns the primal point together with the multipliers of
both row blocks.  Equality multipliers are free, inequality multipliers are
nonnegative, so ``b_eq @ dual_eq + b_ge @ dual_ge`` is the Lagrangian bound.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# pivot tolerances are relative to max(1, max |u|) of the entering column
PIVOT_TOL = 1e-9
FEAS_TOL = 1e-9
OPT_TOL = 1e-10
# pivots below this trigger a refactorization and a second look
SMALL_PIVOT = 1e-7
# a zero-valued artificial is pivoted out only on entries at least this large
FORCE_TOL = 1e-7
REFACTOR_EVERY = 50
# a basis inverse with entries beyond this is treated as singular
MAX_INVERSE = 1e13
# consecutive degenerate pivots tolerated before switching to Bland's rule
DEGENERATE_LIMIT = 25


class LPStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class LPError(ValueError):
    """Raised for malformed linear programs (shape mismatch, NaN/Inf)."""


class _SingularBasis(ArithmeticError):
    pass


def _as_matrix(a, n, name):
    if a is None:
        return np.zeros((0, n))
    a = np.array(a, dtype=float)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(0, n)
    if a.ndim != 2 or a.shape[1] != n:
        raise LPError(f"{name} must have shape (rows, {n}), got {a.shape}")
    return a


def _as_vector(v, m, name):
    if v is None:
        v = np.zeros(m)
    v = np.array(v, dtype=float).reshape(-1)
    if v.shape[0] != m:
        raise LPError(f"{name} must have length {m}, got {v.shape[0]}")
    return v


@dataclass(frozen=True, eq=False)
class LinearProgram:
    c: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_ge: np.ndarray = None
    b_ge: np.ndarray = None
    nonneg: np.ndarray = None

    def __post_init__(self):
        c = np.array(self.c, dtype=float).reshape(-1)
        n = c.shape[0]
        A_eq = _as_matrix(self.A_eq, n, "A_eq")
        A_ge = _as_matrix(self.A_ge, n, "A_ge")
        b_eq = _as_vector(self.b_eq, A_eq.shape[0], "b_eq")
        b_ge = _as_vector(self.b_ge, A_ge.shape[0], "b_ge")
        nonneg = np.ones(n, dtype=bool) if self.nonneg is None else np.array(self.nonneg, dtype=bool).reshape(-1)
        if nonneg.shape[0] != n:
            raise LPError(f"nonneg must have length {n}, got {nonneg.shape[0]}")
        for name, arr in (("c", c), ("A_eq", A_eq), ("b_eq", b_eq), ("A_ge", A_ge), ("b_ge", b_ge)):
            if not np.all(np.isfinite(arr)):
                raise LPError(f"{name} contains NaN or Inf")
        for name, arr in (("c", c), ("A_eq", A_eq), ("b_eq", b_eq), ("A_ge", A_ge), ("b_ge", b_ge), ("nonneg", nonneg)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def m_ge(self) -> int:
        return self.A_ge.shape[0]


@dataclass
class LPResult:
    status: LPStatus
    x: np.ndarray | None = None
    objective: float = float("nan")
    dual_eq: np.ndarray | None = None
    dual_ge: np.ndarray | None = None
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is LPStatus.OPTIMAL


class _Tableau:
    """Revised simplex state over a standard-form problem ``A z = b, z >= 0``."""

    def __init__(self, A, b, basis, refactor_every=REFACTOR_EVERY):
        self.refactor_every = refactor_every
        self.A = A
        self.b = b
        self.m = A.shape[0]
        self.basis = np.array(basis, dtype=int)
        self.iterations = 0
        self.refactor()

    def refactor(self):
        B = self.A[:, self.basis]
        try:
            Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            raise _SingularBasis from None
        if not np.all(np.isfinite(Binv)) or np.abs(Binv).max() > MAX_INVERSE:
            raise _SingularBasis
        self.Binv = Binv
        self.xB = self.Binv @ self.b
        self._since_refactor = 0

    def run(self, c, enterable, artificial):
        """Iterate to optimality for cost ``c``.

        ``enterable`` masks columns allowed to enter; ``artificial`` marks
        columns that must leave as soon as they can (held at zero).
        Returns "optimal" or "unbounded".
        """
        A = self.A
        m = self.m
        degenerate = 0
        is_basic = np.zeros(A.shape[1], dtype=bool)
        is_basic[self.basis] = True
        # columns whose entry made the basis singular, barred until the next pivot
        barred = np.zeros(A.shape[1], dtype=bool)
        max_iter = 50 * (m + A.shape[1]) + 1000
        for _ in range(max_iter):
            y = c[self.basis] @ self.Binv
            d = c - y @ A
            cand = enterable & ~is_basic & ~barred & (d < -OPT_TOL)
            if not cand.any():
                return "optimal"
            if degenerate >= DEGENERATE_LIMIT:
                q = int(np.flatnonzero(cand)[0])
            else:
                idx = np.flatnonzero(cand)
                q = int(idx[np.argmin(d[idx])])
            u = self.Binv @ A[:, q]
            scale = max(1.0, float(np.abs(u).max()))
            pos = u > PIVOT_TOL * scale
            forced = artificial[self.basis] & (np.abs(u) > FORCE_TOL)
            if not pos.any() and not forced.any():
                if self._since_refactor:
                    # confirm the ray with a fresh inverse before giving up
                    self.refactor()
                    continue
                return "unbounded"
            ratios = np.full(m, np.inf)
            ratios[pos] = np.maximum(self.xB[pos], 0.0) / u[pos]
            ratios[forced] = 0.0
            tmin = ratios.min()
            ties = np.flatnonzero(ratios <= tmin + FEAS_TOL * 1e-2)
            if degenerate >= DEGENERATE_LIMIT:
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                r = int(ties[np.argmax(np.abs(u[ties]))])
            small = abs(u[r]) < SMALL_PIVOT * scale
            if small and self._since_refactor:
                self.refactor()
                continue
            try:
                leaving = self._pivot(r, q, u, small)
            except _SingularBasis:
                barred[q] = True
                continue
            barred[:] = False
            degenerate = degenerate + 1 if tmin <= FEAS_TOL else 0
            is_basic[leaving] = False
            is_basic[q] = True
            self.iterations += 1
        raise RuntimeError("simplex iteration limit reached")

    def _pivot(self, r, q, u, small=False):
        leaving = self.basis[r]
        self.basis[r] = q
        self._since_refactor += 1
        piv = u[r]
        if self._since_refactor >= self.refactor_every or small:
            # a small pivot is checked against a fresh factorization of the new basis
            try:
                self.refactor()
            except _SingularBasis:
                self.basis[r] = leaving
                self.refactor()
                raise
            return leaving
        row = self.Binv[r] / piv
        self.Binv -= np.outer(u, row)
        self.Binv[r] = row
        xr = self.xB[r] / piv
        self.xB -= u * xr
        self.xB[r] = xr
        return leaving


def solve_lp(lp: LinearProgram) -> LPResult:
    """Solve ``lp`` to optimality or certify infeasibility/unboundedness."""
    try:
        return _solve(lp, REFACTOR_EVERY)
    except _SingularBasis:
        # eta updates drifted into a singular basis; redo with a fresh inverse every pivot
        try:
            return _solve(lp, 1)
        except _SingularBasis:
            raise ArithmeticError("simplex basis became numerically singular") from None


def _solve(lp: LinearProgram, refactor_every: int) -> LPResult:
    n, me, mg = lp.n, lp.m_eq, lp.m_ge
    free = np.flatnonzero(~lp.nonneg)
    # structural columns: one per variable, plus a negative twin for free ones
    A_rows = np.vstack([lp.A_eq, lp.A_ge]) if me + mg else np.zeros((0, n))
    m = me + mg
    A_struct = np.hstack([A_rows, -A_rows[:, free]])
    c_struct = np.concatenate([lp.c, -lp.c[free]])
    n_struct = A_struct.shape[1]
    slack = np.zeros((m, mg))
    slack[me:, :] = -np.eye(mg)
    A = np.hstack([A_struct, slack])
    c = np.concatenate([c_struct, np.zeros(mg)])
    b = np.concatenate([lp.b_eq, lp.b_ge])

    if m == 0:
        # no rows: optimum is 0 unless some direction decreases the cost
        if np.any(lp.c[lp.nonneg] < 0) or np.any(lp.c[~lp.nonneg] != 0):
            return LPResult(LPStatus.UNBOUNDED)
        return LPResult(LPStatus.OPTIMAL, np.zeros(n), 0.0, np.zeros(0), np.zeros(0))

    sign = np.where(b < 0, -1.0, 1.0)
    # ">=" rows with nonpositive rhs start with their slack basic after flipping
    sign[me:][b[me:] == 0] = -1.0
    A = A * sign[:, None]
    b = b * sign

    basis = np.empty(m, dtype=int)
    needs_art = np.ones(m, dtype=bool)
    for i in range(me, m):
        if sign[i] < 0:
            basis[i] = n_struct + (i - me)
            needs_art[i] = False
    art_rows = np.flatnonzero(needs_art)
    n_real = A.shape[1]
    if art_rows.size:
        art = np.zeros((m, art_rows.size))
        art[art_rows, np.arange(art_rows.size)] = 1.0
        A = np.hstack([A, art])
        basis[art_rows] = n_real + np.arange(art_rows.size)
    N = A.shape[1]
    artificial = np.zeros(N, dtype=bool)
    artificial[n_real:] = True

    tab = _Tableau(A, b, basis, refactor_every)
    if art_rows.size:
        c1 = np.zeros(N)
        c1[n_real:] = 1.0
        tab.run(c1, ~artificial, np.zeros(N, dtype=bool))
        tab.refactor()
        infeas = float(np.sum(np.abs(tab.xB[artificial[tab.basis]])))
        if infeas > FEAS_TOL * max(1.0, float(np.abs(b).max())):
            return LPResult(LPStatus.INFEASIBLE, iterations=tab.iterations)
    c2 = np.zeros(N)
    c2[:n_real] = c
    status = tab.run(c2, ~artificial, artificial)
    if status == "unbounded":
        return LPResult(LPStatus.UNBOUNDED, iterations=tab.iterations)

    # final clean solve from the optimal basis
    B = A[:, tab.basis]
    xB = np.linalg.solve(B, b)
    y = np.linalg.solve(B.T, c2[tab.basis])
    z = np.zeros(N)
    z[tab.basis] = xB
    z = np.maximum(z, 0.0)
    x = z[:n].copy()
    x[free] -= z[n:n_struct]
    duals = sign * y
    return LPResult(
        LPStatus.OPTIMAL,
        x=x,
        objective=float(lp.c @ x),
        dual_eq=duals[:me],
        dual_ge=np.maximum(duals[me:], 0.0),
        iterations=tab.iterations,
    )
