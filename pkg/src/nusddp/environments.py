"""Inventory-control and portfolio instance families.

Inventory actions are ``x = [y, z, w]``: sales ``y`` (inventory x customer),
procurement ``z`` (supplier x inventory) and closing stock ``w``.  Sales in a
stage are limited by the stock carried in from the previous stage, so
procurement decisions are bets on the next stage's demand.

Portfolio actions are ``x = [y, z, w, r]``: units sold, units bought, units
held and cash.  Prices are stage observations and appear in the cash rows.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .msso import Binding, ProblemInstance, ScenarioDistribution, StageTemplate

PRICE_FLOOR = 1e-3
DOMAINS = ("mean", "joint", "joint_c")


@dataclass
class InventoryConfig:
    S: int = 2
    I: int = 2
    C: int = 4
    T: int = 5
    mu_d: tuple = (11.0, 20.0)
    sigma_d: tuple = (0.0, 5.0)
    mu_c: tuple = (0.3, 0.7)
    sigma_c: float = 0.2
    # which context components vary: mean -> mu_d, joint -> +sigma_d, joint_c -> +mu_c
    domain: str = "joint"
    procurement_price: tuple = (1.0, 2.0)
    sales_price: tuple = (4.0, 6.0)
    holding_cost: tuple = (0.1, 0.3)
    supplier_capacity: tuple = (20.0, 40.0)
    inventory_capacity: tuple = (40.0, 80.0)
    initial_inventory: float = 10.0
    constants_seed: int = 20211
    name: str = "inventory"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if min(self.S, self.I, self.C, self.T) < 1:
            raise ValueError("S, I, C and T must be positive")

    @property
    def d(self) -> int:
        return self.S * self.I + self.I * self.C + self.I

    @classmethod
    def sml_sht(cls, **kw):
        return cls(**{"S": 2, "I": 2, "C": 4, "T": 5, "name": "sml-sht", **kw})

    @classmethod
    def mid_lng(cls, **kw):
        return cls(**{"S": 10, "I": 10, "C": 20, "T": 10, "name": "mid-lng", **kw})

    def context_mean(self) -> np.ndarray:
        return np.array([np.mean(self.mu_d), np.mean(self.sigma_d), np.mean(self.mu_c)])

    def context_range(self) -> np.ndarray:
        return np.array([np.ptp(self.mu_d), np.ptp(self.sigma_d), np.ptp(self.mu_c)])

    def draw_context(self, rng) -> np.ndarray:
        """Meta-distribution draw of ``(mu_d, sigma_d, mu_c)``; fixed components sit at mid-range."""
        u = self.context_mean()
        u[0] = rng.uniform(*self.mu_d)
        if self.domain in ("joint", "joint_c"):
            u[1] = rng.uniform(*self.sigma_d)
        if self.domain == "joint_c":
            u[2] = rng.uniform(*self.mu_c)
        return u


@dataclass
class InventoryConstants:
    p: np.ndarray   # (S, I) procurement prices
    q: np.ndarray   # (I, C) sales prices
    h: np.ndarray   # (I,) holding costs
    u: np.ndarray   # (S,) supplier capacities
    v: np.ndarray   # (I,) inventory capacities
    w0: np.ndarray  # (I,) opening stock


def inventory_constants(cfg: InventoryConfig) -> InventoryConstants:
    """Prices and capacities shared by every instance of the family."""
    rng = np.random.default_rng(cfg.constants_seed)
    return InventoryConstants(
        p=rng.uniform(*cfg.procurement_price, size=(cfg.S, cfg.I)),
        q=rng.uniform(*cfg.sales_price, size=(cfg.I, cfg.C)),
        h=rng.uniform(*cfg.holding_cost, size=cfg.I),
        u=rng.uniform(*cfg.supplier_capacity, size=cfg.S),
        v=rng.uniform(*cfg.inventory_capacity, size=cfg.I),
        w0=np.full(cfg.I, float(cfg.initial_inventory)),
    )


def inventory_layout(cfg: InventoryConfig) -> dict:
    S, I, C = cfg.S, cfg.I, cfg.C
    return {"y": [0, I * C], "z": [I * C, I * C + S * I], "w": [I * C + S * I, cfg.d]}


def _inventory_template(cfg, k: InventoryConstants, n_clusters: int) -> StageTemplate:
    S, I, C, d = cfg.S, cfg.I, cfg.C, cfg.d
    lay = inventory_layout(cfg)
    y0, z0, w0 = lay["y"][0], lay["z"][0], lay["w"][0]
    yi = lambda v, c: y0 + v * C + c  # noqa: E731
    zi = lambda s, v: z0 + s * I + v  # noqa: E731
    per = C // n_clusters

    c = np.concatenate([-k.q.reshape(-1), k.p.reshape(-1), k.h])
    bindings = []
    # transport costs enter the sales coefficients: -q_vc + c_t
    for v in range(I):
        for cu in range(C):
            src = n_clusters + v * n_clusters + cu // per
            bindings.append(Binding("c", (yi(v, cu),), src, 1.0, -k.q[v, cu]))

    # inventory transition: sum_s z - sum_c y - w = -w_prev
    A = np.zeros((I, d))
    B = np.zeros((I, d))
    for v in range(I):
        A[v, [zi(s, v) for s in range(S)]] = 1.0
        A[v, [yi(v, cu) for cu in range(C)]] = -1.0
        A[v, w0 + v] = -1.0
        B[v, w0 + v] = 1.0
    b = np.zeros(I)

    rows, rhs, coupling = [], [], []
    for cu in range(C):                                   # demand
        r = np.zeros(d)
        r[[yi(v, cu) for v in range(I)]] = -1.0
        rows.append(r)
        rhs.append(0.0)
        coupling.append(np.zeros(d))
        bindings.append(Binding("b_ge", (len(rows) - 1,), cu // per, -1.0, 0.0))
    for s in range(S):                                    # supplier capacity
        r = np.zeros(d)
        r[[zi(s, v) for v in range(I)]] = -1.0
        rows.append(r)
        rhs.append(-k.u[s])
        coupling.append(np.zeros(d))
    for v in range(I):                                    # inventory capacity
        r = np.zeros(d)
        r[w0 + v] = -1.0
        rows.append(r)
        rhs.append(-k.v[v])
        coupling.append(np.zeros(d))
    for v in range(I):                                    # sales limited by carried stock
        r = np.zeros(d)
        r[[yi(v, cu) for cu in range(C)]] = -1.0
        rows.append(r)
        rhs.append(0.0)
        cp = np.zeros(d)
        cp[w0 + v] = 1.0
        coupling.append(cp)
    return StageTemplate(c=c, A=A, B=B, b=b, A_ge=np.array(rows), B_ge=np.array(coupling),
                         b_ge=np.array(rhs), bindings=bindings)


def make_clustered_inventory_instance(cfg: InventoryConfig, n_clusters: int, seed=None,
                                      context=None) -> ProblemInstance:
    """Inventory instance whose customers share demand and transport draws within clusters.

    ``context`` overrides the meta-distribution draw of ``(mu_d, sigma_d, mu_c)``.
    """
    if n_clusters < 1 or cfg.C % n_clusters:
        raise ValueError(f"{cfg.C} customers cannot be split into {n_clusters} equal clusters")
    rng = np.random.default_rng(seed)
    u = cfg.draw_context(rng) if context is None else np.asarray(context, dtype=float)
    mu_d, sigma_d, mu_c = u
    k = inventory_constants(cfg)
    if n_clusters < cfg.C:
        # customers of a cluster are interchangeable: they share the first member's prices
        per = cfg.C // n_clusters
        k.q = k.q[:, (np.arange(cfg.C) // per) * per]
    tmpl = _inventory_template(cfg, k, n_clusters)
    n_tr = cfg.I * n_clusters
    mean = np.concatenate([np.full(n_clusters, mu_d), np.full(n_tr, mu_c)])
    std = np.concatenate([np.full(n_clusters, sigma_d), np.full(n_tr, cfg.sigma_c)])
    dist = ScenarioDistribution(mean[None, :], std[None, :], lower=np.zeros(mean.shape[0]), truncation="reject")
    x0 = np.zeros(cfg.d)
    lay = inventory_layout(cfg)
    x0[lay["w"][0]:] = k.w0
    return ProblemInstance(
        stages=[tmpl] * cfg.T, dist=dist, xi_1=mean, context=np.tile(u, (cfg.T, 1)), x0=x0,
        name=f"{cfg.name}-{seed}",
        meta={"family": "inventory", "S": cfg.S, "I": cfg.I, "C": cfg.C, "clusters": n_clusters,
              "layout": lay, "seed": seed, "context": u.tolist()},
        # sales per stage cannot exceed stock capacity and transport costs are >= 0
        stage_cost_floor=-float(k.q.max(axis=1) @ np.maximum(k.v, k.w0)),
    )


def make_inventory_instance(cfg: InventoryConfig, seed=None, context=None) -> ProblemInstance:
    return make_clustered_inventory_instance(cfg, cfg.C, seed, context)


# --- portfolio -------------------------------------------------------------


@dataclass
class ARModel:
    phi: np.ndarray     # (I, o); phi[i, k] multiplies p_{t-1-k}
    sigma: np.ndarray   # (I,) collapsed noise stddev
    stderr: np.ndarray = None

    @property
    def order(self) -> int:
        return self.phi.shape[1]

    def forecast(self, window, horizon, std_scale=1.0):
        """Marginal mean and stddev of prices ``1..horizon`` steps past ``window``.

        ``window`` holds the last ``o`` price rows, oldest first.
        """
        window = np.asarray(window, dtype=float)
        n_assets, o = self.phi.shape
        hist = list(window[-o:])
        mean = np.empty((horizon, n_assets))
        psi = [np.ones(n_assets)]
        std = np.empty((horizon, n_assets))
        for h in range(horizon):
            nxt = sum(self.phi[:, k] * hist[-1 - k] for k in range(o))
            hist.append(nxt)
            mean[h] = nxt
            std[h] = self.sigma * std_scale * np.sqrt(np.sum(np.square(psi), axis=0))
            psi.append(sum(self.phi[:, k] * psi[-1 - k] for k in range(min(o, len(psi)))))
        return mean, std


def fit_ar(prices, order: int) -> ARModel:
    """Per-asset least-squares AR fit without intercept.

    ``prices`` is ``(n_days, n_assets)`` or a mapping of per-ticker series.
    """
    if isinstance(prices, dict):
        prices = np.column_stack([np.asarray(v, dtype=float) for v in prices.values()])
    prices = np.asarray(prices, dtype=float)
    if prices.ndim == 1:
        prices = prices[:, None]
    n, n_assets = prices.shape
    if order < 1:
        raise ValueError("AR order must be at least 1")
    if n <= order + 2:
        raise ValueError(f"series of length {n} too short for order {order}")
    phi = np.empty((n_assets, order))
    sigma = np.empty(n_assets)
    se = np.empty((n_assets, order))
    for i in range(n_assets):
        p = prices[:, i]
        X = np.column_stack([p[order - 1 - k:n - 1 - k] for k in range(order)])
        y = p[order:]
        if np.linalg.matrix_rank(X) < order or np.ptp(p) == 0:
            raise np.linalg.LinAlgError(f"asset {i}: singular AR regression (constant or collinear series)")
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
        dof = max(1, y.shape[0] - order)
        s2 = float(resid @ resid) / dof
        phi[i] = coef
        sigma[i] = math.sqrt(s2)
        se[i] = np.sqrt(s2 * np.diag(np.linalg.inv(X.T @ X)))
    return ARModel(phi, sigma, se)


def generate_ar_prices(model: ARModel, init, n_days: int, seed=None) -> np.ndarray:
    """Simulate ``n_days`` prices continuing from the ``init`` window, floored at ``PRICE_FLOOR``."""
    rng = np.random.default_rng(seed)
    o = model.order
    hist = [np.asarray(r, dtype=float) for r in np.asarray(init, dtype=float)[-o:]]
    out = np.empty((n_days, model.phi.shape[0]))
    for t in range(n_days):
        p = sum(model.phi[:, k] * hist[-1 - k] for k in range(o)) + model.sigma * rng.standard_normal(model.phi.shape[0])
        p = np.maximum(p, PRICE_FLOOR)
        hist.append(p)
        out[t] = p
    return out


@dataclass
class PortfolioConfig:
    I: int = 5
    T: int = 5
    order: int = 2
    phi: np.ndarray = None      # (I, order); defaults to a mildly trending AR(2)
    sigma: np.ndarray = None    # (I,)
    std_scale: float = 1.0
    spread: float = 1.001
    r0: float = 1000.0
    w0: np.ndarray = None
    name: str = "portfolio"

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("AR order must be at least 1")
        if self.spread < 1:
            raise ValueError("spread must be >= 1 (ask >= bid)")
        if self.phi is None:
            base = np.zeros(self.order)
            base[0] = 1.2
            if self.order > 1:
                base[1] = -0.19
            self.phi = np.tile(base, (self.I, 1))
        self.phi = np.asarray(self.phi, dtype=float).reshape(self.I, self.order)
        self.sigma = np.full(self.I, 1.0) if self.sigma is None else np.broadcast_to(
            np.asarray(self.sigma, dtype=float), (self.I,)).copy()
        self.w0 = np.zeros(self.I) if self.w0 is None else np.asarray(self.w0, dtype=float).reshape(self.I)

    @property
    def d(self) -> int:
        return 3 * self.I + 1

    def ar_model(self) -> ARModel:
        return ARModel(self.phi, self.sigma)


def portfolio_layout(n_assets) -> dict:
    I = n_assets
    return {"y": [0, I], "z": [I, 2 * I], "w": [2 * I, 3 * I], "r": [3 * I, 3 * I + 1]}


def _portfolio_template(n_assets, spread) -> StageTemplate:
    I = n_assets
    d = 3 * I + 1
    Y, Z, W, R = 0, I, 2 * I, 3 * I
    bindings = []
    c = np.zeros(d)
    for i in range(I):
        bindings.append(Binding("c", (Y + i,), i, -1.0 / spread))
        bindings.append(Binding("c", (Z + i,), i, 1.0))
    # position: -y + z - w = -w_prev ; cash: q.y - p.z - r = -r_prev
    A = np.zeros((I + 1, d))
    B = np.zeros((I + 1, d))
    for i in range(I):
        A[i, [Y + i, Z + i, W + i]] = [-1.0, 1.0, -1.0]
        B[i, W + i] = 1.0
        bindings.append(Binding("A", (I, Y + i), i, 1.0 / spread))
        bindings.append(Binding("A", (I, Z + i), i, -1.0))
    A[I, R] = -1.0
    B[I, R] = 1.0
    # sales limited by holdings: -y >= -w_prev ; purchases limited by cash: -p.z >= -r_prev
    A_ge = np.zeros((I + 1, d))
    B_ge = np.zeros((I + 1, d))
    for i in range(I):
        A_ge[i, Y + i] = -1.0
        B_ge[i, W + i] = 1.0
        bindings.append(Binding("A_ge", (I, Z + i), i, -1.0))
    B_ge[I, R] = 1.0
    return StageTemplate(c=c, A=A, B=B, b=np.zeros(I + 1), A_ge=A_ge, B_ge=B_ge,
                         b_ge=np.zeros(I + 1), bindings=bindings)


def make_portfolio_instance(cfg: PortfolioConfig, last_o_prices, name=None) -> ProblemInstance:
    """``T``-stage trading problem seeded at the price window ``last_o_prices``.

    Stage 1 trades at the newest window price; later stages see independent
    draws from the AR forecast marginals (floored at ``PRICE_FLOOR``).
    """
    window = np.asarray(last_o_prices, dtype=float).reshape(-1, cfg.I)
    if window.shape[0] != cfg.order:
        raise ValueError(f"need {cfg.order} price rows, got {window.shape[0]}")
    mean, std = cfg.ar_model().forecast(window, cfg.T - 1, cfg.std_scale)
    mean = np.vstack([window[-1], mean])
    std = np.vstack([np.zeros(cfg.I), std])
    dist = ScenarioDistribution(mean, std, lower=np.full(cfg.I, PRICE_FLOOR), truncation="clip")
    tmpl = _portfolio_template(cfg.I, cfg.spread)
    lay = portfolio_layout(cfg.I)
    x0 = np.zeros(cfg.d)
    x0[lay["w"][0]:lay["w"][1]] = cfg.w0
    x0[lay["r"][0]] = cfg.r0
    return ProblemInstance(
        stages=[tmpl] * cfg.T, dist=dist, xi_1=window[-1], context=np.tile(window.reshape(-1), (cfg.T, 1)),
        x0=x0, name=name or cfg.name,
        meta={"family": "portfolio", "I": cfg.I, "layout": lay, "spread": cfg.spread},
        # loose: no stage can gain more than 100x the opening wealth
        stage_cost_floor=-100.0 * float(cfg.r0 + cfg.w0 @ window[-1]),
    )


# --- instance families -----------------------------------------------------


class InventoryFamily:
    """Meta-distribution over inventory instances; an instance is fixed by its seed."""

    def __init__(self, cfg: InventoryConfig, n_clusters: int | None = None):
        self.cfg = cfg
        self.n_clusters = n_clusters or cfg.C
        self.name = cfg.name

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def T(self) -> int:
        return self.cfg.T

    @property
    def n_features(self) -> int:
        return 3

    @property
    def feature_mean(self) -> np.ndarray:
        return self.cfg.context_mean()

    @property
    def feature_scale(self) -> np.ndarray:
        r = self.cfg.context_range()
        return np.where(r > 0, r, 1.0)

    def instance(self, seed, context=None) -> ProblemInstance:
        return make_clustered_inventory_instance(self.cfg, self.n_clusters, seed, context)

    def mean_instance(self) -> ProblemInstance:
        inst = self.instance(None, self.cfg.context_mean())
        inst.name = f"{self.cfg.name}-mean"
        return inst


class PortfolioFamily:
    """Portfolio instances seeded at random windows of a simulated AR price path."""

    def __init__(self, cfg: PortfolioConfig, init_prices=None, n_days: int = 500, series_seed: int = 7):
        self.cfg = cfg
        self.name = cfg.name
        init = np.full((cfg.order, cfg.I), 100.0) if init_prices is None else np.asarray(init_prices, float)
        self.prices = generate_ar_prices(cfg.ar_model(), init, n_days, series_seed)
        windows = np.stack([self.prices[i:i + cfg.order].reshape(-1)
                            for i in range(self.prices.shape[0] - cfg.order + 1)])
        self._mean = windows.mean(axis=0)
        sd = windows.std(axis=0)
        self._scale = np.where(sd > 0, sd, 1.0)

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def T(self) -> int:
        return self.cfg.T

    @property
    def n_features(self) -> int:
        return self.cfg.order * self.cfg.I

    @property
    def feature_mean(self) -> np.ndarray:
        return self._mean

    @property
    def feature_scale(self) -> np.ndarray:
        return self._scale

    def instance(self, seed, context=None) -> ProblemInstance:
        if context is not None:
            window = np.asarray(context, dtype=float).reshape(self.cfg.order, self.cfg.I)
        else:
            rng = np.random.default_rng(seed)
            i = int(rng.integers(self.prices.shape[0] - self.cfg.order + 1))
            window = self.prices[i:i + self.cfg.order]
        return make_portfolio_instance(self.cfg, window, name=f"{self.cfg.name}-{seed}")

    def mean_instance(self) -> ProblemInstance:
        inst = self.instance(None, self._mean)
        inst.name = f"{self.cfg.name}-mean"
        return inst


def make_family(section: str, path=None, n_clusters: int | None = None):
    cfg = load_env_config(section, path)
    if isinstance(cfg, InventoryConfig):
        return InventoryFamily(cfg, n_clusters)
    return PortfolioFamily(cfg)


def load_price_csv(path) -> dict:
    """Read a ``ticker`` header plus one row of decimal prices per day."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or any(not h for h in header):
            raise ValueError(f"{path}: header row must name every column")
        cols = [[] for _ in header]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            for j, cell in enumerate(row):
                cell = cell.strip()
                if not cell:
                    raise ValueError(f"{path}: missing value at row {lineno}, column {j + 1} ({header[j]})")
                try:
                    val = float(cell)
                except ValueError:
                    raise ValueError(f"{path}: non-numeric value {cell!r} at row {lineno}, "
                                     f"column {j + 1} ({header[j]})") from None
                if not math.isfinite(val):
                    raise ValueError(f"{path}: non-finite value at row {lineno}, column {j + 1} ({header[j]})")
                cols[j].append(val)
    for name, col in zip(header, cols):
        out[name] = np.array(col)
    return out


def save_price_csv(series: dict, path) -> None:
    names = list(series)
    cols = [np.asarray(series[k], dtype=float) for k in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


# --- config files ----------------------------------------------------------


def _parse_value(raw):
    parts = [p.strip() for p in raw.split(",")]
    vals = []
    for p in parts:
        try:
            vals.append(int(p))
        except ValueError:
            try:
                vals.append(float(p))
            except ValueError:
                vals.append(p)
    return vals[0] if len(vals) == 1 else tuple(vals)


def load_env_config(section: str, path=None):
    """Build an environment config from ``[section]`` of an INI file.

    Without ``path`` the packaged defaults are used.  Sections are named
    ``inventory.<name>`` or ``portfolio.<name>``.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is None:
        parser.read_string(resources.files("nusddp").joinpath("data/environments.ini").read_text())
    else:
        parser.read(Path(path))
    if section not in parser:
        raise KeyError(f"no [{section}] section (have {parser.sections()})")
    family = section.split(".", 1)[0]
    values = {k: _parse_value(v) for k, v in parser[section].items()}
    values.setdefault("name", section.split(".", 1)[-1])
    cls = {"inventory": InventoryConfig, "portfolio": PortfolioConfig}.get(family)
    if cls is None:
        raise KeyError(f"unknown environment family {family!r}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise KeyError(f"[{section}] has unknown keys {sorted(unknown)}")
    if family == "portfolio" and "phi" in values:
        values["phi"] = np.asarray(values["phi"], dtype=float)
    return cls(**values)
