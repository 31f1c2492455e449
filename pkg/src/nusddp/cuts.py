"""Affine cuts and their pointwise maximum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Cut:
    beta: np.ndarray
    alpha: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(beta)) or not np.isfinite(self.alpha):
            raise ValueError("cut coefficients must be finite")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", float(self.alpha))

    def __call__(self, x):
        return np.asarray(x) @ self.beta + self.alpha


class ValueFunctionApprox:
    """Convex piecewise-linear function ``max_k beta_k^T x + alpha_k``.

    Cuts are append-only, so ``evaluate`` can only grow as cuts are added.
    """

    def __init__(self, dim: int, cuts=()):
        self.dim = int(dim)
        self._betas = np.zeros((0, self.dim))
        self._alphas = np.zeros(0)
        self.extend(cuts)

    @classmethod
    def zero(cls, dim: int) -> "ValueFunctionApprox":
        return cls(dim, [Cut(np.zeros(dim), 0.0)])

    @classmethod
    def from_arrays(cls, betas, alphas) -> "ValueFunctionApprox":
        betas = np.atleast_2d(np.asarray(betas, dtype=float))
        alphas = np.asarray(alphas, dtype=float).reshape(-1)
        if betas.shape[0] != alphas.shape[0]:
            raise ValueError("betas and alphas disagree on the cut count")
        vf = cls(betas.shape[1])
        if not (np.all(np.isfinite(betas)) and np.all(np.isfinite(alphas))):
            raise ValueError("cut coefficients must be finite")
        vf._betas = betas.copy()
        vf._alphas = alphas.copy()
        return vf

    def add(self, cut: Cut) -> None:
        if cut.beta.shape[0] != self.dim:
            raise ValueError(f"cut has dimension {cut.beta.shape[0]}, expected {self.dim}")
        self._betas = np.vstack([self._betas, cut.beta[None, :]])
        self._alphas = np.append(self._alphas, cut.alpha)

    def extend(self, cuts) -> None:
        for cut in cuts:
            self.add(cut)

    @property
    def betas(self) -> np.ndarray:
        return self._betas

    @property
    def alphas(self) -> np.ndarray:
        return self._alphas

    @property
    def cuts(self) -> list[Cut]:
        return [Cut(b, a) for b, a in zip(self._betas, self._alphas)]

    def __len__(self) -> int:
        return self._alphas.shape[0]

    def evaluate(self, x) -> np.ndarray | float:
        """Max over cuts at ``x`` (a point or an array of points)."""
        if len(self) == 0:
            raise ValueError("empty value function")
        x = np.asarray(x, dtype=float)
        vals = x @ self._betas.T + self._alphas
        return vals.max(axis=-1)

    __call__ = evaluate

    def copy(self) -> "ValueFunctionApprox":
        return ValueFunctionApprox.from_arrays(self._betas, self._alphas)

    def tail(self, n: int) -> "ValueFunctionApprox":
        """The ``n`` most recently added cuts."""
        n = max(1, min(n, len(self)))
        return ValueFunctionApprox.from_arrays(self._betas[-n:], self._alphas[-n:])

    def to_dict(self) -> dict:
        return {"dim": self.dim, "betas": self._betas.tolist(), "alphas": self._alphas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueFunctionApprox":
        betas = np.asarray(d["betas"], dtype=float).reshape(-1, d["dim"])
        return cls.from_arrays(betas, d["alphas"])

    def __repr__(self):
        return f"ValueFunctionApprox(dim={self.dim}, cuts={len(self)})"
