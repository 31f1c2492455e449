"""Learned value-function predictor, shared decision-space projection and meta-training.

The predictor maps a context vector ``u`` and a stage index ``t`` to ``K``
affine pieces ``(beta_k, alpha_k)``::

    z   = E[t] + W_in (u - u_mean) / u_scale + b_in      (128)
    h1  = relu(W1 z + b1)                                (512)
    h2  = relu(W2 h1 + b2)                               (512)
    out = W3 h2 + b3                                     (K * (d + 1))
    cut_k = out_shift[t] + out_scale * out[k]

All arithmetic is float64 and gradients are written out by hand.  The
output affine map (a centre per stage, one scale per coordinate) is fitted
once from the first solved record so that the raw network outputs are of
unit scale; the EMD is measured in those raw
coordinates, i.e. with per-coordinate weights ``1 / out_scale**2``.
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cuts import ValueFunctionApprox
from .msso import ProblemInstance, StageInfeasible
from .sddp import StoppingRule, sddp_solve

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nusddp.model"
DATASET_FORMAT = "nusddp.dataset"
FORMAT_VERSION = 2
_PARAMS = ("E", "W_in", "b_in", "W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    inner_steps: int = 20
    batch_size: int = 1
    # extra SGD steps over the finished dataset, after the last epoch
    final_steps: int = 0
    reg: float = 1e-6
    # bound on the global gradient norm of one step (None: plain SGD)
    clip_norm: float | None = 100.0
    anneal_max: float = 0.9
    # fraction of epochs over which p_i ramps from 0 to anneal_max
    anneal_frac: float = 0.5
    window: int | None = None
    K: int = 64
    p: int | None = None
    proj_lr: float = 0.5
    proj_steps: int = 1
    proj_mode: str = "hebbian"
    hidden: int = 512
    embed: int = 128
    sddp_iters: int = 200
    sddp_m: int = 20
    stall_iters: int = 5
    stall_tol: float = 1e-5
    # forward passes steered by predicted cuts in warm-started solves
    guide_iters: int = 10
    val_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.reg < 0:
            raise ValueError("regularization weight must be nonnegative")
        if not 0.0 <= self.anneal_max <= 1.0:
            raise ValueError("annealing probability must lie in [0, 1]")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.guide_iters < 0:
            raise ValueError("guide_iters must be nonnegative")
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.proj_mode not in ("hebbian", "eig"):
            raise ValueError(f"unknown projection mode {self.proj_mode!r}")

    @property
    def target_window(self) -> int:
        return self.window or 2 * self.K

    def anneal_prob(self, epoch: int, n_epochs: int) -> float:
        """Linear ramp 0 -> anneal_max over the first ``anneal_frac`` of the epochs."""
        ramp = max(1.0, self.anneal_frac * n_epochs)
        return self.anneal_max * min(1.0, epoch / ramp)


@dataclass
class TrainingRecord:
    instance_id: str
    context: np.ndarray        # (T, f)
    cuts: list                 # cuts[t] approximates the cost-to-go after stage t
    actions: list              # actions[t] has shape (m, d_t)
    iterations: int = 0
    lower_bound: float = float("nan")

    def __post_init__(self):
        self.context = np.atleast_2d(np.asarray(self.context, dtype=float))
        self.actions = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.actions]
        if len(self.cuts) != self.context.shape[0] or len(self.actions) != self.context.shape[0]:
            raise ValueError("context, cuts and actions must cover the same stages")
        for t, (v, a) in enumerate(zip(self.cuts, self.actions)):
            if v.dim != a.shape[1]:
                raise ValueError(f"stage {t + 1}: cut dimension {v.dim} but actions of dimension {a.shape[1]}")

    @property
    def T(self) -> int:
        return self.context.shape[0]

    def targets(self, window: int) -> list:
        """Most recent ``window`` cuts per stage, excluding the terminal stage."""
        return [self.cuts[t].tail(window) for t in range(self.T - 1)]

    def to_dict(self):
        return {"instance_id": self.instance_id, "context": self.context.tolist(),
                "cuts": [v.to_dict() for v in self.cuts], "actions": [a.tolist() for a in self.actions],
                "iterations": self.iterations, "lower_bound": self.lower_bound}

    @classmethod
    def from_dict(cls, d):
        return cls(d["instance_id"], d["context"], [ValueFunctionApprox.from_dict(v) for v in d["cuts"]],
                   d["actions"], d["iterations"], d["lower_bound"])


def check_record_feasibility(record: TrainingRecord, inst: ProblemInstance, batch_samples, tol=1e-6) -> float:
    """Largest constraint violation of the stored actions along the diagonal sample paths."""
    worst = 0.0
    m = record.actions[0].shape[0]
    for j in range(m):
        x_prev = inst.x0
        for t in range(inst.T):
            xi = batch_samples[t, j if t else 0]
            data = inst.stage_data(t, xi)
            x = record.actions[t][j]
            r_eq = data.A @ x - (data.b - data.B @ x_prev)
            r_ge = (data.b_ge - data.B_ge @ x_prev) - data.A_ge @ x
            worst = max(worst, np.abs(r_eq).max(initial=0.0), r_ge.max(initial=0.0), (-x).max(initial=0.0))
            x_prev = x
    return worst


def save_dataset(records, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": FORMAT_VERSION}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def load_dataset(path) -> list:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a version {FORMAT_VERSION} dataset")
        return [TrainingRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# ----------------------------------------------------------------------------
# predictor


class MaxAffinePredictor:
    def __init__(self, n_features: int, d: int, T: int, K: int = 64, hidden: int = 512, embed: int = 128,
                 seed=None, feature_mean=None, feature_scale=None):
        self.n_features, self.d, self.T, self.K = int(n_features), int(d), int(T), int(K)
        self.hidden, self.embed = int(hidden), int(embed)
        rng = np.random.default_rng(seed)

        def unif(fan_in, shape):
            b = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape)

        n_out = self.K * (self.d + 1)
        self.params = {
            "E": unif(self.embed, (self.T, self.embed)),
            "W_in": unif(self.n_features, (self.n_features, self.embed)),
            "b_in": unif(self.n_features, self.embed),
            "W1": unif(self.embed, (self.embed, self.hidden)),
            "b1": unif(self.embed, self.hidden),
            "W2": unif(self.hidden, (self.hidden, self.hidden)),
            "b2": unif(self.hidden, self.hidden),
            "W3": unif(self.hidden, (self.hidden, n_out)),
            "b3": unif(self.hidden, n_out),
        }
        self.feature_mean = np.zeros(self.n_features) if feature_mean is None else np.asarray(feature_mean, float)
        fs = np.ones(self.n_features) if feature_scale is None else np.asarray(feature_scale, float).copy()
        fs[fs == 0] = 1.0
        self.feature_scale = fs
        self.out_shift = np.zeros((self.T, self.d + 1))
        self.out_scale = np.ones(self.d + 1)
        self.out_fitted = False

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_(self) -> "MaxAffinePredictor":
        for v in self.params.values():
            v[...] = 0.0
        return self

    def copy(self) -> "MaxAffinePredictor":
        other = object.__new__(MaxAffinePredictor)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        for k in ("feature_mean", "feature_scale", "out_shift", "out_scale"):
            setattr(other, k, getattr(self, k).copy())
        return other

    def fit_output_scale(self, targets) -> None:
        """Centre each stage's outputs on its mean target cut and scale each coordinate.

        ``targets[t]`` holds the cuts for stage ``t``.  The scale is the spread
        about the stage means.  Slope scales are floored at a tenth of their
        pooled value, so a slope that barely varies in these targets does not
        dominate later losses.
        """
        shift = np.zeros((self.T, self.d + 1))
        resid = []
        for t, v in enumerate(targets):
            rows = np.column_stack([v.betas, v.alphas])
            if len(rows):
                shift[t] = rows.mean(axis=0)
                resid.append(rows - shift[t])
        self.out_shift = shift
        sd = np.vstack(resid).std(axis=0) if resid else np.ones(self.d + 1)
        floor = 0.1 * np.sqrt(np.mean(sd[:-1] ** 2))
        sd[:-1] = np.maximum(sd[:-1], floor)
        self.out_scale = np.where(sd > 1e-8, sd, 1.0)
        self.out_fitted = True

    def _inputs(self, U, ts):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        ts = np.asarray(ts, dtype=int).reshape(-1)
        if U.shape[1] != self.n_features:
            raise ValueError(f"context has {U.shape[1]} features, model expects {self.n_features}")
        if U.shape[0] != ts.shape[0]:
            raise ValueError("one stage index per context row is required")
        if np.any(ts < 0) or np.any(ts >= self.T):
            raise ValueError(f"stage index outside [0, {self.T})")
        return (U - self.feature_mean) / self.feature_scale, ts

    def forward(self, U, ts, cache=False):
        """Raw head outputs of shape ``(n, K, d + 1)``."""
        P = self.params
        Us, ts = self._inputs(U, ts)
        z = P["E"][ts] + Us @ P["W_in"] + P["b_in"]
        a1 = z @ P["W1"] + P["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ P["W2"] + P["b2"]
        h2 = np.maximum(a2, 0.0)
        out = (h2 @ P["W3"] + P["b3"]).reshape(-1, self.K, self.d + 1)
        if cache:
            return out, (Us, ts, z, a1, h1, a2, h2)
        return out

    def backward(self, g_out, cache) -> dict:
        """Parameter gradients given ``dL/d out`` of shape ``(n, K, d + 1)``."""
        P = self.params
        Us, ts, z, a1, h1, a2, h2 = cache
        g = g_out.reshape(g_out.shape[0], -1)
        grads = {"W3": h2.T @ g, "b3": g.sum(axis=0)}
        g = (g @ P["W3"].T) * (a2 > 0)
        grads["W2"], grads["b2"] = h1.T @ g, g.sum(axis=0)
        g = (g @ P["W2"].T) * (a1 > 0)
        grads["W1"], grads["b1"] = z.T @ g, g.sum(axis=0)
        g = g @ P["W1"].T
        grads["W_in"], grads["b_in"] = Us.T @ g, g.sum(axis=0)
        gE = np.zeros_like(P["E"])
        np.add.at(gE, ts, g)
        grads["E"] = gE
        return grads

    def to_cuts(self, raw, t: int) -> np.ndarray:
        return self.out_shift[t] + self.out_scale * raw

    def predict(self, u, t: int) -> ValueFunctionApprox:
        raw = self.forward(np.asarray(u, dtype=float)[None, :], [t])[0]
        c = self.to_cuts(raw, t)
        return ValueFunctionApprox.from_arrays(c[:, :-1], c[:, -1])

    def save(self, path) -> None:
        meta = {"format": CHECKPOINT_FORMAT, "version": FORMAT_VERSION,
                "config": {"n_features": self.n_features, "d": self.d, "T": self.T, "K": self.K,
                           "hidden": self.hidden, "embed": self.embed, "out_fitted": self.out_fitted},
                "shapes": {k: list(v.shape) for k, v in self.params.items()}}
        arrays = dict(self.params, feature_mean=self.feature_mean, feature_scale=self.feature_scale,
                      out_shift=self.out_shift, out_scale=self.out_scale)
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.array(json.dumps(meta)), **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "MaxAffinePredictor":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != FORMAT_VERSION:
                raise ValueError(f"{path}: not a version {FORMAT_VERSION} model checkpoint")
            cfg = meta["config"]
            m = cls(cfg["n_features"], cfg["d"], cfg["T"], cfg["K"], cfg["hidden"], cfg["embed"], seed=0)
            for k in _PARAMS:
                if list(z[k].shape) != meta["shapes"][k]:
                    raise ValueError(f"{path}: tensor {k} has shape {z[k].shape}, header says {meta['shapes'][k]}")
                m.params[k] = z[k].copy()
            m.feature_mean, m.feature_scale = z["feature_mean"].copy(), z["feature_scale"].copy()
            m.out_shift, m.out_scale = z["out_shift"].copy(), z["out_scale"].copy()
            m.out_fitted = cfg["out_fitted"]
        return m


def predict_value_function(model: MaxAffinePredictor, u_t, t: int) -> ValueFunctionApprox:
    """``K`` predicted cuts approximating the cost-to-go after stage ``t`` (0-based)."""
    return model.predict(u_t, t)


# ----------------------------------------------------------------------------
# earth mover's distance between cut sets


@dataclass
class EmdResult:
    cost: float
    rows: np.ndarray           # matched indices into set A
    cols: np.ndarray           # matched indices into set B

    @property
    def matching(self) -> np.ndarray:
        return np.column_stack([self.rows, self.cols])


def _as_cut_matrix(s) -> np.ndarray:
    if isinstance(s, ValueFunctionApprox):
        return np.column_stack([s.betas, s.alphas])
    a = np.atleast_2d(np.asarray(s, dtype=float))
    return a


def emd_cut_distance(set_a, set_b, metric=None) -> EmdResult:
    """Minimum total squared distance over partial matchings of ``min(|A|, |B|)`` pairs.

    Sets are value functions or ``(n, d + 1)`` arrays of ``(beta, alpha)``
    rows.  ``metric`` optionally weights the coordinates.
    """
    A, B = _as_cut_matrix(set_a), _as_cut_matrix(set_b)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("EMD needs two nonempty cut sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError("cut sets have different dimensions")
    w = np.ones(A.shape[1]) if metric is None else np.asarray(metric, dtype=float)
    diff = A[:, None, :] - B[None, :, :]
    D = np.einsum("ijk,k->ij", diff * diff, w)
    # rectangular assignment already matches exactly min(|A|, |B|) pairs
    rows, cols = linear_sum_assignment(D)
    return EmdResult(float(D[rows, cols].sum()), rows, cols)


# ----------------------------------------------------------------------------
# shared projection


class SharedProjection:
    """Orthonormal ``d x p`` basis tracked by the generalized Hebbian rule.

    ``mode="eig"`` instead keeps the pooled second-moment matrix and sets
    ``G`` to its top ``p`` eigenvectors.
    """

    def __init__(self, d: int, p: int, seed=None, mode: str = "hebbian", lr: float = 0.5):
        if not 1 <= p <= d:
            raise ValueError(f"projection rank must lie in [1, {d}]")
        if mode not in ("hebbian", "eig"):
            raise ValueError(f"unknown projection mode {mode!r}")
        rng = np.random.default_rng(seed)
        self.G = _orthonormalize(rng.standard_normal((d, p))) if p < d else np.eye(d)
        self.mode, self.lr = mode, lr
        self.pooled = np.zeros((d, d))
        self.n_pooled = 0

    @property
    def d(self):
        return self.G.shape[0]

    @property
    def p(self):
        return self.G.shape[1]

    def orthonormality_error(self) -> float:
        return float(np.abs(self.G.T @ self.G - np.eye(self.p)).max())

    def update(self, samples) -> np.ndarray:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if self.mode == "eig":
            if samples.shape[0] == 0:
                raise ValueError("projection update needs at least one sample")
            self.pooled += samples.T @ samples
            self.n_pooled += samples.shape[0]
            vals, vecs = np.linalg.eigh(self.pooled / self.n_pooled)
            if vals[-1] > 0:
                self.G = _orthonormalize(vecs[:, ::-1][:, :self.p])
            return self.G
        self.G = update_projection(self.G, samples, self.lr)
        return self.G

    def to_dict(self):
        return {"G": self.G.tolist(), "mode": self.mode, "lr": self.lr}


def _orthonormalize(M) -> np.ndarray:
    """Gram-Schmidt via QR with column signs kept positive on the diagonal of R."""
    Q, R = np.linalg.qr(M)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


def update_projection(G, action_samples, lr: float = 0.5) -> np.ndarray:
    """One Sanger (generalized Hebbian) step followed by re-orthonormalization.

    ``Xi`` is the minibatch second moment of the samples; the step is scaled
    by ``1 / trace(Xi)`` so ``lr`` is dimensionless.
    """
    X = np.atleast_2d(np.asarray(action_samples, dtype=float))
    G = np.asarray(G, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("projection update needs at least one sample")
    if X.shape[1] != G.shape[0]:
        raise ValueError(f"samples have dimension {X.shape[1]}, projection expects {G.shape[0]}")
    Xi = X.T @ X / X.shape[0]
    tr = np.trace(Xi)
    if tr <= 0:
        return G.copy()
    XiG = Xi @ G
    # column j only sees the variance left after columns 0..j-1 are removed
    step = XiG - G @ np.triu(G.T @ XiG)
    return _orthonormalize(G + (lr / tr) * step)


def principal_angles(A, B) -> np.ndarray:
    """Principal angles between the column spans of ``A`` and ``B``."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))


# ----------------------------------------------------------------------------
# loss and gradients


@dataclass
class LossBreakdown:
    loss: float
    projection: float
    emd: float
    regularizer: float
    emd_per_stage: list = field(default_factory=list)


def _emd_terms(model: MaxAffinePredictor, record: TrainingRecord, window: int, want_grad: bool):
    T = record.T
    ts = np.arange(T - 1)
    raw, cache = model.forward(record.context[:T - 1], ts, cache=True)
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError(f"non-finite prediction on record {record.instance_id}")
    g_out = np.zeros_like(raw) if want_grad else None
    per_stage = []
    for t, target in enumerate(record.targets(window)):
        if target.dim != model.d:
            raise ValueError(f"record {record.instance_id}: cut dimension {target.dim}, model expects {model.d}")
        # compare in raw output coordinates
        tgt = (np.column_stack([target.betas, target.alphas]) - model.out_shift[t]) / model.out_scale
        res = emd_cut_distance(raw[t], tgt)
        per_stage.append(res.cost)
        if want_grad:
            g_out[t, res.rows] = 2.0 * (raw[t, res.rows] - tgt[res.cols])
    return per_stage, g_out, cache


def projection_term(G, record: TrainingRecord) -> float:
    G = np.asarray(G, dtype=float)
    total = 0.0
    for a in record.actions:
        if a.shape[1] != G.shape[0]:
            raise ValueError(f"record {record.instance_id}: actions of dimension {a.shape[1]}, G has {G.shape[0]} rows")
        total -= float(np.sum((a @ G) ** 2))
    return total


def regularizer(model: MaxAffinePredictor) -> float:
    return float(sum(np.sum(v * v) for v in model.params.values()))


def training_loss(model: MaxAffinePredictor, G, record: TrainingRecord, reg: float = 0.0,
                  window: int | None = None) -> LossBreakdown:
    """Projection term, summed per-stage EMD to the record's cuts, and ``reg * ||W||^2``."""
    window = window or 2 * model.K
    per_stage, _, _ = _emd_terms(model, record, window, want_grad=False)
    proj = projection_term(G, record)
    r = reg * regularizer(model)
    emd = float(sum(per_stage))
    return LossBreakdown(proj + emd + r, proj, emd, r, per_stage)


def loss_gradient(model: MaxAffinePredictor, records, reg: float = 0.0, window: int | None = None):
    """Mean over ``records`` of the W-dependent loss and its gradient."""
    window = window or 2 * model.K
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    total = 0.0
    for rec in records:
        per_stage, g_out, cache = _emd_terms(model, rec, window, want_grad=True)
        g = model.backward(g_out, cache)
        for k, v in g.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite gradient for {k} on record {rec.instance_id}")
            grads[k] += v
        total += sum(per_stage)
    n = max(1, len(records))
    for k in grads:
        grads[k] = grads[k] / n + 2.0 * reg * model.params[k]
    return total / n + reg * regularizer(model), grads


def grad_step(model: MaxAffinePredictor, records, cfg: TrainConfig) -> MaxAffinePredictor:
    """In-place SGD step ``W <- W - lr * grad``; returns the model.

    With ``cfg.clip_norm`` set, the gradient is rescaled so its global norm
    does not exceed it.
    """
    if len(records) == 0 and cfg.reg == 0:
        raise ValueError("gradient step needs a nonempty batch")
    _, grads = loss_gradient(model, records, cfg.reg, cfg.target_window)
    step = cfg.lr
    if cfg.clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.clip_norm:
            step *= cfg.clip_norm / norm
    for k, g in grads.items():
        model.params[k] -= step * g
    return model


# ----------------------------------------------------------------------------
# warm starts and the meta-training loop


def predicted_vfns(model: MaxAffinePredictor, inst: ProblemInstance) -> list:
    """Predicted cuts for every non-terminal stage; the terminal stage is zero."""
    out = [model.predict(inst.context[t], t) for t in range(inst.T - 1)]
    out.append(ValueFunctionApprox.zero(inst.stages[-1].dim))
    return out


def init_vfns_annealed(model: MaxAffinePredictor, inst: ProblemInstance, gamma: int) -> list:
    """``gamma == 1``: predicted cuts; ``gamma == 0``: the instance's trivial start."""
    if gamma not in (0, 1):
        raise ValueError("gamma must be 0 or 1")
    return predicted_vfns(model, inst) if gamma else inst.initial_vfns()


def solve_record(inst: ProblemInstance, guide_vfns=None, cfg: TrainConfig | None = None, seed=None):
    """Solve ``inst`` with SDDP and package the outcome as a training record.

    SDDP always starts from ``inst.initial_vfns()``; ``guide_vfns`` (e.g.
    predicted cuts) only steers the first ``cfg.guide_iters`` forward passes,
    so the stored cuts are valid lower bounds.  The initial cuts themselves
    are left out of the record.
    """
    cfg = cfg or TrainConfig()
    init = inst.initial_vfns()
    res = sddp_solve(inst, init, n_iters=cfg.sddp_iters, m=cfg.sddp_m, J=1, seed=seed,
                     stop=StoppingRule(stall_iters=cfg.stall_iters, stall_tol=cfg.stall_tol),
                     guide_vfns=guide_vfns, guide_iters=cfg.guide_iters)
    cuts = [v if t == inst.T - 1 else ValueFunctionApprox.from_arrays(v.betas[len(v0):], v.alphas[len(v0):])
            for t, (v, v0) in enumerate(zip(res.vfns, init))]
    rec = TrainingRecord(inst.name, inst.context, cuts, res.actions, res.iterations, res.lower_bound)
    return rec, res


def validation_emd(model: MaxAffinePredictor, records, window: int) -> float:
    if not records:
        return float("nan")
    return float(np.mean([sum(_emd_terms(model, r, window, False)[0]) for r in records]))


@dataclass
class TrainResult:
    model: MaxAffinePredictor
    projection: SharedProjection
    dataset: list
    history: list
    best_val: float = float("nan")
    skipped: list = field(default_factory=list)

    @property
    def G(self):
        return self.projection.G


def meta_train(family, cfg: TrainConfig, n_epochs: int, seed=None, *, train_seeds=None,
               val_records=(), dataset=None) -> TrainResult:
    """Self-improving training loop.

    ``family.instance(seed)`` draws an instance from the meta-distribution;
    epoch ``i`` uses ``train_seeds[i]`` when given.  Each epoch solves the
    instance from an annealed warm start, stores the record, takes
    ``cfg.inner_steps`` SGD steps on records drawn from the growing dataset
    and updates the shared projection with pooled actions.  The model with
    the lowest validation EMD is returned.
    """
    rng = np.random.default_rng(seed)
    model = MaxAffinePredictor(family.n_features, family.d, family.T, cfg.K, cfg.hidden, cfg.embed,
                               seed=rng.integers(2**63), feature_mean=family.feature_mean,
                               feature_scale=family.feature_scale)
    proj = SharedProjection(model.d, cfg.p or model.d, seed=rng.integers(2**63), mode=cfg.proj_mode, lr=cfg.proj_lr)
    dataset = list(dataset or [])
    if dataset:
        model.fit_output_scale(dataset[0].targets(cfg.target_window))
    history, skipped = [], []
    best_val, best_model = math.inf, None
    window = cfg.target_window

    def train_steps(n):
        for _ in range(n):
            idx = rng.integers(len(dataset), size=cfg.batch_size)
            grad_step(model, [dataset[i] for i in idx], cfg)

    def maybe_checkpoint(epoch):
        nonlocal best_val, best_model
        val = validation_emd(model, val_records, window)
        history[-1]["val_emd"] = val
        if val < best_val:
            best_val, best_model = val, model.copy()
            log.info("epoch %d: validation EMD %.6g (best so far)", epoch, val)

    for epoch in range(n_epochs):
        inst_seed = train_seeds[epoch % len(train_seeds)] if train_seeds is not None else int(rng.integers(2**31))
        inst = family.instance(inst_seed)
        gamma = int(model.out_fitted and rng.random() < cfg.anneal_prob(epoch, n_epochs))
        try:
            guide = init_vfns_annealed(model, inst, gamma) if gamma else None
            rec, res = solve_record(inst, guide, cfg, seed=rng.integers(2**63))
        except StageInfeasible as exc:
            log.warning("epoch %d: skipping %s (%s)", epoch, inst.name, exc)
            skipped.append(inst.name)
            continue
        dataset.append(rec)
        if not model.out_fitted:
            model.fit_output_scale(rec.targets(window))
        train_steps(cfg.inner_steps)
        pooled = np.vstack([a for r in dataset[-8:] for a in r.actions])
        for _ in range(cfg.proj_steps):
            proj.update(pooled)
        history.append({"epoch": epoch, "instance": inst.name, "gamma": gamma, "sddp_iters": res.iterations,
                        "train_emd": validation_emd(model, [rec], window)})
        if val_records and (epoch + 1) % cfg.val_every == 0:
            maybe_checkpoint(epoch)
        log.debug("epoch %d: %s", epoch, history[-1])

    if cfg.final_steps and dataset:
        done = 0
        while done < cfg.final_steps:
            n = min(max(1, cfg.inner_steps * 10), cfg.final_steps - done)
            train_steps(n)
            done += n
            history.append({"epoch": n_epochs, "final_steps": done})
            if val_records:
                maybe_checkpoint(n_epochs)

    if best_model is not None:
        model = best_model
    return TrainResult(model, proj, dataset, history, best_val if best_model is not None else float("nan"), skipped)
