"""Landscape-level ecological connectivity (EC) model.

Agricultural plots are cut into candidate pieces: ``S_b`` boundary arcs
(margins) and about ``S_c`` Voronoi interior cells (habitat patches). Existing
habitat plots become single, always-selected pieces. A selection ``x`` scores

    Z = sum_i s_i x_i + sum_{(i,j) in A} w_ij x_i x_j

over touching pairs ``A``; the pair variables of the linearised model are
eliminated because every ``w_ij >= 0``. Each farm must keep
``N_f,new >= (1 - rho_max) N_f,base``, where plot NPVs are recomputed from the
selected pieces.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon
from shapely.ops import substring

from .ei import EIDecision, EISolution, PlotEconomics, accumulated_discount, plot_economics, plot_npv_habitat, time_accumulation
from .landscape import TOUCH_TOL, InvalidInputError, LandscapeConfiguration, random_points_in, voronoi_partition
from .metrics import Node, PieceGraph
from .params import EIParams


class DiscretizationError(ValueError):
    pass


class ECConfigurationError(ValueError):
    """The NPV-loss constraint cannot be stated for this configuration."""


class ECInfeasibleError(ValueError):
    """No selection keeps every farm within its NPV-loss limit."""


class OracleTooLargeError(ValueError):
    pass


class PieceKind(str, Enum):
    MARGIN_ARC = "margin_arc"
    HABITAT_CELL = "habitat_cell"
    FULL_HABITAT = "full_habitat"


@dataclass(frozen=True)
class Piece:
    id: int
    kind: PieceKind
    plot_id: int
    geometry: object
    length: float  # m, arcs only
    area: float  # ha, cells and full habitats only
    centroid: tuple[float, float]

    def __post_init__(self):
        if self.kind is PieceKind.MARGIN_ARC:
            if not self.length > 0 or self.area != 0:
                raise ValueError(f"piece {self.id}: margin arcs need length > 0 and zero area")
        elif not self.area > 0 or self.length != 0:
            raise ValueError(f"piece {self.id}: areal pieces need area > 0 and zero length")

    @property
    def fixed(self) -> bool:
        return self.kind is PieceKind.FULL_HABITAT


@dataclass(frozen=True)
class ECConfig:
    s_b: int = 4
    s_c: int = 4
    d_adj: float = 0.0
    alpha_al: float = 1e-9
    w_m: float = 50.0
    rho_max: float = 0.2
    d_neib: float = 1000.0
    eps_sol: float = 1e-6
    anneal_initial_temp: float = 0.05  # fraction of the mean piece score
    anneal_cooling: float = 0.95
    anneal_sweeps: int = 200
    anneal_restarts: int = 2
    anneal_patience: int = 20  # sweeps without a new best before stopping
    reposition_enum_cap: int = 4096
    oracle_cap: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.s_b < 1 or self.s_c < 1:
            raise ValueError("s_b and s_c must be >= 1")
        if not 0 <= self.rho_max < 1:
            raise ValueError("rho_max must lie in [0, 1)")
        if self.d_adj < 0 or self.d_neib < 0:
            raise ValueError("distances must be >= 0")

    @classmethod
    def from_dict(cls, data: dict | None) -> "ECConfig":
        return cls(**(data or {}))


# -- discretisation ----------------------------------------------------------------------------

def discretize(config: LandscapeConfiguration, ec: ECConfig) -> list[Piece]:
    pieces: list[Piece] = []
    for plot in config.plots:
        geom = plot.geometry
        if geom.is_empty or geom.area <= 0 or geom.length <= 0 or not geom.is_valid:
            raise DiscretizationError(f"plot {plot.id} has a degenerate polygon")
        if not plot.is_agricultural:
            c = geom.centroid
            pieces.append(Piece(len(pieces), PieceKind.FULL_HABITAT, plot.id, geom, 0.0, plot.area, (c.x, c.y)))
            continue
        ring = LineString(geom.exterior.coords)
        perim = ring.length
        for k in range(ec.s_b):
            arc = substring(ring, perim * k / ec.s_b, perim * (k + 1) / ec.s_b)
            if arc.length <= 0:
                raise DiscretizationError(f"plot {plot.id}: zero-length boundary arc")
            c = arc.centroid
            pieces.append(Piece(len(pieces), PieceKind.MARGIN_ARC, plot.id, arc, arc.length, 0.0, (c.x, c.y)))
        rng = np.random.default_rng([ec.seed, config.config_id, plot.id])
        try:
            cells = voronoi_partition(geom, random_points_in(geom, ec.s_c, rng))
        except InvalidInputError as exc:
            raise DiscretizationError(f"plot {plot.id}: {exc}") from None
        for cell in cells:
            if cell.is_empty or cell.area <= 0:
                continue
            c = cell.centroid
            pieces.append(Piece(len(pieces), PieceKind.HABITAT_CELL, plot.id, cell, 0.0,
                                cell.area / 10_000.0, (c.x, c.y)))
    return pieces


def piece_score(piece: Piece, ec: ECConfig) -> float:
    if piece.kind is PieceKind.MARGIN_ARC:
        return ec.w_m * piece.length
    return piece.area


def connection_weight(pi: Piece, pj: Piece, alpha_al: float) -> float:
    return pi.length * pj.length + pi.area * pj.area + alpha_al * (pi.area * pj.length + pj.area * pi.length)


def build_adjacency(pieces, d_adj: float, alpha_al: float = 1e-9) -> list[tuple[int, int, float]]:
    geoms = np.array([p.geometry for p in pieces], dtype=object)
    if len(geoms) == 0:
        return []
    tree = shapely.STRtree(geoms)
    src, dst = tree.query(geoms, predicate="dwithin", distance=d_adj + TOUCH_TOL)
    pairs = sorted({(int(i), int(j)) for i, j in zip(src, dst) if i < j})
    return [(i, j, connection_weight(pieces[i], pieces[j], alpha_al)) for i, j in pairs]


# -- problem --------------------------------------------------------------------------------

@dataclass(frozen=True)
class ECProblem:
    config: LandscapeConfiguration
    params: EIParams
    ec: ECConfig
    pieces: tuple[Piece, ...]
    adjacency: tuple[tuple[int, int, float], ...]
    baseline_farm_npvs: dict[int, float]
    economics: dict[int, PlotEconomics]
    ei_decisions: EIDecision | None = None

    @property
    def scores(self) -> np.ndarray:
        return np.array([piece_score(p, self.ec) for p in self.pieces])

    @cached_property
    def free(self) -> np.ndarray:
        return np.array([p.id for p in self.pieces if not p.fixed], dtype=int)

    @cached_property
    def fixed(self) -> np.ndarray:
        return np.array([p.id for p in self.pieces if p.fixed], dtype=int)

    def pieces_of(self, plot_id: int, kind: PieceKind) -> list[int]:
        return [p.id for p in self.pieces if p.plot_id == plot_id and p.kind is kind]

    @cached_property
    def constrained_farms(self) -> tuple[int, ...]:
        """Farms with agricultural plots; the others have nothing to decide."""
        return tuple(f.id for f in self.config.farms
                     if any(self.config.plots[p].is_agricultural for p in f.plot_ids))

    def threshold(self, farm_id: int) -> float:
        return (1.0 - self.ec.rho_max) * self.baseline_farm_npvs[farm_id]

    def full_selection(self, free_x) -> np.ndarray:
        x = np.zeros(len(self.pieces), dtype=bool)
        x[self.fixed] = True
        x[self.free] = np.asarray(free_x, dtype=bool)
        return x

    @cached_property
    def model(self) -> "_SearchModel":
        return _SearchModel(self)


def build_problem(config: LandscapeConfiguration, params: EIParams, ec: ECConfig,
                  ei_solution: EISolution | None = None,
                  baseline_farm_npvs: dict[int, float] | None = None,
                  economics: dict[int, PlotEconomics] | None = None,
                  pieces: list[Piece] | None = None) -> ECProblem:
    if baseline_farm_npvs is None:
        if ei_solution is None:
            raise ValueError("need an EI solution or explicit baseline farm NPVs")
        baseline_farm_npvs = ei_solution.farm_npvs
    pieces = pieces if pieces is not None else discretize(config, ec)
    adjacency = build_adjacency(pieces, ec.d_adj, ec.alpha_al)
    return ECProblem(config, params, ec, tuple(pieces), tuple(adjacency), dict(baseline_farm_npvs),
                     economics or plot_economics(config, params),
                     ei_solution.decisions if ei_solution is not None else None)


def with_rho(problem: ECProblem, rho_max: float) -> ECProblem:
    return replace(problem, ec=replace(problem.ec, rho_max=rho_max))


# -- direct evaluation --------------------------------------------------------------------

def objective_z(x, problem: ECProblem) -> float:
    x = np.asarray(x, dtype=bool)
    if not x[problem.fixed].all():
        raise ValueError("full-habitat pieces must be selected")
    scores = problem.scores
    z = float(scores[x].sum())
    for i, j, w in problem.adjacency:
        if x[i] and x[j]:
            z += w
    return z


def linearized_objective(x, problem: ECProblem) -> float:
    """Z with explicit pair variables y_ij, maximised by LP for the given x."""
    from scipy.optimize import linprog

    x = np.asarray(x, dtype=float)
    base = float(problem.scores @ x)
    if not problem.adjacency:
        return base
    n = len(problem.adjacency)
    w = np.array([a[2] for a in problem.adjacency])
    rows, rhs = [], []
    for k, (i, j, _) in enumerate(problem.adjacency):
        for bound in (x[i], x[j]):  # y <= x_i, y <= x_j
            r = np.zeros(n); r[k] = 1.0
            rows.append(r); rhs.append(bound)
        r = np.zeros(n); r[k] = -1.0  # y >= x_i + x_j - 1
        rows.append(r); rhs.append(1.0 - x[i] - x[j])
    res = linprog(-w, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=[(0, 1)] * n, method="highs")
    if not res.success:
        raise RuntimeError(f"pair LP failed: {res.message}")
    return base + float(-res.fun)


def effective_fractions(x, plot_id: int, problem: ECProblem) -> tuple[float, float]:
    plot = problem.config.plots[plot_id]
    if not plot.is_agricultural:
        raise ValueError(f"plot {plot_id} is not agricultural")
    x = np.asarray(x, dtype=bool)
    length = sum(problem.pieces[q].length for q in problem.pieces_of(plot_id, PieceKind.MARGIN_ARC) if x[q])
    area = sum(problem.pieces[q].area for q in problem.pieces_of(plot_id, PieceKind.HABITAT_CELL) if x[q])
    return min(1.0, length / plot.perimeter), min(1.0, area / plot.area)


def _service_distance(problem: ECProblem, q: int, plot_id: int) -> float:
    piece = problem.pieces[q]
    if piece.plot_id == plot_id:
        return 0.0
    return math.dist(piece.centroid, problem.config.plots[plot_id].centroid)


@dataclass(frozen=True)
class NPVRecalc:
    plot_npvs: dict[int, float]
    farm_npvs: dict[int, float]
    fractions: dict[int, tuple[float, float]]
    yield_factors: dict[int, float]


def recalc_npv(x, problem: ECProblem) -> NPVRecalc:
    """Plot and farm NPVs for a piece selection, evaluated year by year."""
    x = np.asarray(x, dtype=bool)
    cfg, params = problem.config, problem.params
    e = params.economics
    T = int(e.horizon)
    t = np.arange(1, T + 1, dtype=float)
    disc = np.array(e.discount_factors())
    selected = [q for q in range(len(problem.pieces)) if x[q]]
    plot_npvs, fractions, factors = {}, {}, {}
    for plot in cfg.plots:
        if not plot.is_agricultural:
            plot_npvs[plot.id] = plot_npv_habitat(plot.area, e)
            continue
        crop = params.crop(plot.label)
        econ = problem.economics[plot.id]
        fm, fh = effective_fractions(x, plot.id, problem)
        P = np.zeros(T)
        S = np.zeros(T)
        for q in selected:
            piece = problem.pieces[q]
            d = _service_distance(problem, q, plot.id)
            if piece.plot_id != plot.id and d > problem.ec.d_neib:
                continue
            home = cfg.plots[piece.plot_id]
            if piece.kind is PieceKind.MARGIN_ARC:
                w = piece.length / home.perimeter
                P += w * crop.alpha * math.exp(-crop.beta * d) * (1 - np.exp(-crop.gamma * t))
                S += w * crop.delta * math.exp(-crop.epsilon * d) * (1 - np.exp(-crop.zeta * t))
            else:
                w = piece.area / home.area if piece.kind is PieceKind.HABITAT_CELL else 1.0
                P += w * crop.alpha_h * math.exp(-crop.beta_h * d) * (1 - np.exp(-crop.gamma_h * t))
                S += w * crop.delta_h * math.exp(-crop.epsilon_h * d) * (1 - np.exp(-crop.zeta_h * t))
        A = plot.area
        revenue = plot.base_yield * econ.price * A * (1 - fh) * (1 + P + S)
        maint = A * (fm * econ.c_m_maint + fh * econ.c_h_maint + (1 - fh) * econ.c_ag_maint)
        payment = econ.habitat_payment * A * fh
        npv = -A * (fm * econ.c_m_impl + fh * econ.c_h_impl) + float(((revenue - maint + payment) * disc).sum())
        plot_npvs[plot.id] = npv
        fractions[plot.id] = (fm, fh)
        factors[plot.id] = float(((1 + P + S) * disc).sum() / disc.sum())
    farm_npvs = {f.id: float(sum(plot_npvs[p] for p in f.plot_ids)) for f in cfg.farms}
    return NPVRecalc(plot_npvs, farm_npvs, fractions, factors)


# -- solutions ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ECSolution:
    mode: str
    x: np.ndarray
    z: float
    fractions: dict[int, tuple[float, float]]
    yield_factors: dict[int, float]
    plot_npvs: dict[int, float]
    farm_npvs: dict[int, float]
    baseline_farm_npvs: dict[int, float]
    feasible: bool
    violations: tuple[int, ...] = ()

    @property
    def selected(self) -> list[int]:
        return [int(i) for i in np.nonzero(self.x)[0]]

    def loss_ratio(self, farm_id: int) -> float:
        base = self.baseline_farm_npvs[farm_id]
        if base == 0:
            return 0.0
        return (base - self.farm_npvs[farm_id]) / base

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "z": self.z, "selected": self.selected, "feasible": self.feasible,
            "violations": list(self.violations),
            "fractions": {str(k): list(v) for k, v in self.fractions.items()},
            "yield_factors": {str(k): v for k, v in self.yield_factors.items()},
            "plot_npvs": {str(k): v for k, v in self.plot_npvs.items()},
            "farm_npvs": {str(k): v for k, v in self.farm_npvs.items()},
            "baseline_farm_npvs": {str(k): v for k, v in self.baseline_farm_npvs.items()},
        }


def feasibility_slack(threshold):
    """Round-off allowance on N_f,new >= threshold; lets rho_max = 0 keep an exactly reproduced baseline."""
    return 1e-9 * np.maximum(1.0, np.abs(threshold))


def make_solution(problem: ECProblem, x, mode: str) -> ECSolution:
    x = np.asarray(x, dtype=bool).copy()
    x[problem.fixed] = True
    z = objective_z(x, problem)
    rec = recalc_npv(x, problem)
    violations = tuple(f for f in problem.constrained_farms
                       if rec.farm_npvs[f] < problem.threshold(f) - feasibility_slack(problem.threshold(f)))
    x.flags.writeable = False
    return ECSolution(mode, x, z, rec.fractions, rec.yield_factors, rec.plot_npvs, rec.farm_npvs,
                      dict(problem.baseline_farm_npvs), not violations, violations)


# -- vectorised model used by the searches -----------------------------------------------------

class _SearchModel:
    """Z and per-farm NPVs as functions of the free-piece vector.

    Plot k's NPV is V_k (1 - Fh_k)(b_k + C_k . x) minus costs that are linear in
    (Fm_k, Fh_k); each free piece touches its home plot's fractions and the
    service sums of every plot within reach.
    """

    def __init__(self, problem: ECProblem):
        cfg, params = problem.config, problem.params
        e = params.economics
        pieces = problem.pieces
        free = problem.free
        nf = len(free)
        self.nf = nf
        self.ag = list(cfg.agricultural_ids)
        self.row = {pid: k for k, pid in enumerate(self.ag)}
        nag = len(self.ag)
        farm_ids = [f.id for f in cfg.farms]
        self.farm_ids = farm_ids
        farm_pos = {f: k for k, f in enumerate(farm_ids)}
        self.farm_of = np.array([farm_pos[cfg.plots[p].farm_id] for p in self.ag], dtype=int)
        self.farm_matrix = np.zeros((len(farm_ids), nag))
        self.farm_matrix[self.farm_of, np.arange(nag)] = 1.0

        scores = problem.scores
        W = np.zeros((len(pieces), len(pieces)))
        for i, j, w in problem.adjacency:
            W[i, j] = W[j, i] = w
        fixed = problem.fixed
        self.W = W[np.ix_(free, free)]
        self.s = scores[free] + W[np.ix_(free, fixed)].sum(axis=1)
        self.z0 = float(scores[fixed].sum() + 0.5 * W[np.ix_(fixed, fixed)].sum())

        self.annuity = e.annuity
        econ = [problem.economics[p] for p in self.ag]
        self.A = np.array([cfg.plots[p].area for p in self.ag])
        self.V = np.array([cfg.plots[p].base_yield * x.price for p, x in zip(self.ag, econ)]) * self.A
        self.cmi = np.array([x.c_m_impl for x in econ])
        self.chi = np.array([x.c_h_impl for x in econ])
        self.cmm = np.array([x.c_m_maint for x in econ])
        self.chm = np.array([x.c_h_maint for x in econ])
        self.cam = np.array([x.c_ag_maint for x in econ])
        self.pay = np.array([x.habitat_payment for x in econ])

        cache: dict[float, float] = {}

        def acc(rate):
            if rate not in cache:
                cache[rate] = accumulated_discount(rate, e)
            return cache[rate]

        self.home = np.array([self.row[pieces[q].plot_id] for q in free], dtype=int)
        self.is_arc = np.array([pieces[q].kind is PieceKind.MARGIN_ARC for q in free], dtype=bool)
        perim = np.array([cfg.plots[p].perimeter for p in self.ag])
        # share of the home plot's perimeter (arcs) or area (cells)
        self.frac = np.array([pieces[q].length if arc else pieces[q].area for q, arc in zip(free, self.is_arc)])
        self.frac = self.frac / np.where(self.is_arc, perim[self.home], self.A[self.home]) if nf else self.frac

        crops = [params.crop(cfg.plots[p].label) for p in self.ag]

        def col(name):
            return np.array([getattr(c, name) for c in crops])[:, None]

        def accum(name):
            return np.array([acc(getattr(c, name)) for c in crops])[:, None]

        def kernels(dist):
            km = (col("alpha") * np.exp(-col("beta") * dist) * accum("gamma")
                  + col("delta") * np.exp(-col("epsilon") * dist) * accum("zeta"))
            kh = (col("alpha_h") * np.exp(-col("beta_h") * dist) * accum("gamma_h")
                  + col("delta_h") * np.exp(-col("epsilon_h") * dist) * accum("zeta_h"))
            return km, kh

        ref = np.array([cfg.plots[p].centroid for p in self.ag], dtype=float).reshape(-1, 2)

        def distances(cols):
            cent = np.array([pieces[q].centroid for q in cols], dtype=float).reshape(-1, 2)
            dist = np.sqrt(((ref[:, None, :] - cent[None, :, :]) ** 2).sum(-1))
            own = np.array(self.ag)[:, None] == np.array([pieces[q].plot_id for q in cols], dtype=int)[None, :]
            dist = np.where(own, 0.0, dist)
            return dist, own | (dist <= problem.ec.d_neib)

        dist, reach = distances(free)
        km, kh = kernels(dist)
        self.C = np.where(self.is_arc[None, :], km, kh) * self.frac[None, :] * reach
        dist, reach = distances(fixed)
        self.base = self.annuity + (kernels(dist)[1] * reach).sum(axis=1)
        # rows whose NPV a flip of column c can change: its reach plus its home plot
        self.rows = [np.union1d(np.nonzero(self.C[:, c])[0], [self.home[c]]) for c in range(nf)]
        self.rows_coef = [self.C[r, c] for c, r in enumerate(self.rows)]

        hab_npv = np.zeros(len(farm_ids))
        for pid in cfg.habitat_ids:
            hab_npv[farm_pos[cfg.plots[pid].farm_id]] += plot_npv_habitat(cfg.plots[pid].area, e)
        self.hab_npv = hab_npv
        constrained = set(problem.constrained_farms)
        for f in constrained:
            if problem.baseline_farm_npvs[f] <= 0:
                self.bad_farm = f
                break
        else:
            self.bad_farm = None
        self.constrained = np.array([f in constrained for f in farm_ids])
        thr = np.array([problem.threshold(f) if f in constrained else -np.inf for f in farm_ids])
        self.threshold = thr
        # half the round-off slack of the direct check, so model-feasible implies direct-feasible
        self.check = thr - np.where(np.isfinite(thr), 0.5 * feasibility_slack(thr), 0.0)
        self.rows_farms = [self.farm_matrix[:, r] for r in self.rows]

    def plot_npv(self, k, fm, fh, S):
        A, ann = self.A[k], self.annuity
        return (self.V[k] * (1 - fh) * (self.base[k] + S)
                - A * (fm * self.cmi[k] + fh * self.chi[k])
                - ann * A * (fm * self.cmm[k] + fh * self.chm[k] + (1 - fh) * self.cam[k])
                + ann * self.pay[k] * A * fh)

    def z(self, x) -> float:
        xf = x.astype(float)
        return self.z0 + float(self.s @ xf) + 0.5 * float(xf @ self.W @ xf)

    def state(self, x) -> "_State":
        return _State(self, np.asarray(x, dtype=bool).copy())


class _State:
    __slots__ = ("m", "x", "fm", "fh", "S", "N", "farm", "G", "zval")

    def __init__(self, model: _SearchModel, x):
        self.m = model
        self.x = x
        xf = x.astype(float)
        nag = len(model.ag)
        self.fm = np.bincount(model.home, weights=xf * model.frac * model.is_arc, minlength=nag)
        self.fh = np.bincount(model.home, weights=xf * model.frac * ~model.is_arc, minlength=nag)
        self.S = model.C @ xf
        self.N = model.plot_npv(np.arange(nag), self.fm, self.fh, self.S)
        self.farm = model.farm_matrix @ self.N + model.hab_npv
        self.G = model.s + model.W @ xf
        self.zval = model.z(x)

    def copy(self) -> "_State":
        new = object.__new__(_State)
        new.m = self.m
        for name in ("x", "fm", "fh", "S", "N", "farm", "G"):
            setattr(new, name, getattr(self, name).copy())
        new.zval = self.zval
        return new

    def feasible(self) -> bool:
        return bool(np.all(self.farm >= self.m.check))

    def flip(self, c: int):
        m = self.m
        dx = -1.0 if self.x[c] else 1.0
        self.x[c] = not self.x[c]
        self.zval += dx * self.G[c]
        self.G += dx * m.W[:, c]
        k = m.home[c]
        if m.is_arc[c]:
            self.fm[k] += dx * m.frac[c]
        else:
            self.fh[k] += dx * m.frac[c]
        rows = m.rows[c]
        self.S[rows] += dx * m.rows_coef[c]
        new = m.plot_npv(rows, self.fm[rows], self.fh[rows], self.S[rows])
        self.farm += m.rows_farms[c] @ (new - self.N[rows])
        self.N[rows] = new

    def resync(self):
        """Recompute every cached quantity from x, discarding accumulated rounding."""
        self.__init__(self.m, self.x)

    def farm_deltas(self, cols: np.ndarray) -> np.ndarray:
        """Per-farm NPV change of flipping each column on its own (farms x len(cols))."""
        m = self.m
        dx = np.where(self.x[cols], -1.0, 1.0)
        keep = m.V * (1 - self.fh)
        D = m.C[:, cols] * keep[:, None] * dx[None, :]
        k = m.home[cols]
        fm = self.fm[k] + np.where(m.is_arc[cols], dx * m.frac[cols], 0.0)
        fh = self.fh[k] + np.where(m.is_arc[cols], 0.0, dx * m.frac[cols])
        S = self.S[k] + m.C[k, cols] * dx
        D[k, np.arange(len(cols))] = m.plot_npv(k, fm, fh, S) - self.N[k]
        return m.farm_matrix @ D

    def feasible_flips(self, cols: np.ndarray) -> np.ndarray:
        if len(cols) == 0:
            return np.zeros(0, dtype=bool)
        after = self.farm[:, None] + self.farm_deltas(cols)
        return np.all(after >= self.m.check[:, None], axis=0)


# -- repositioning ---------------------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _plot_choices(problem: ECProblem, decisions: EIDecision):
    """Per agricultural plot: every (arc subset, cell subset) with the prescribed counts."""
    col = {int(q): c for c, q in enumerate(problem.free)}
    out = []
    for pid in problem.config.agricultural_ids:
        arcs = [col[q] for q in problem.pieces_of(pid, PieceKind.MARGIN_ARC)]
        cells = [col[q] for q in problem.pieces_of(pid, PieceKind.HABITAT_CELL)]
        m, h = decisions.of(pid)
        km = min(len(arcs), max(0, _round_half_up(m * len(arcs))))
        kh = min(len(cells), max(0, _round_half_up(h * len(cells))))
        combos = [a + b for a in itertools.combinations(arcs, km) for b in itertools.combinations(cells, kh)]
        out.append((arcs + cells, combos))
    return out


def embed_ei_layout(problem: ECProblem, decisions: EIDecision | None = None) -> np.ndarray:
    """Naive placement of the EI amounts: the first arcs and cells of each plot."""
    decisions = decisions or problem.ei_decisions
    xf = np.zeros(len(problem.free), dtype=bool)
    for _, combos in _plot_choices(problem, decisions):
        xf[list(combos[0])] = True
    return problem.full_selection(xf)


def reposition(problem: ECProblem, ei_solution: EISolution | EIDecision | None = None) -> ECSolution:
    """Best placement of each plot's EI amounts; counts per plot are fixed, NPV is not constrained."""
    decisions = ei_solution.decisions if isinstance(ei_solution, EISolution) else ei_solution
    decisions = decisions or problem.ei_decisions
    if decisions is None:
        raise ValueError("repositioning needs EI decisions")
    model = problem.model
    choices = [c for c in _plot_choices(problem, decisions) if len(c[1]) > 1]
    xf = embed_ei_layout(problem, decisions)[problem.free]

    def combo_value(combo, gains):
        idx = list(combo)
        return float(gains[idx].sum() + 0.5 * model.W[np.ix_(idx, idx)].sum())

    total = math.prod(len(c[1]) for c in choices) if choices else 1
    if choices and total <= problem.ec.reposition_enum_cap:
        best, best_z = xf, model.z(xf)
        for pick in itertools.product(*[c[1] for c in choices]):
            trial = xf.copy()
            for (members, _), combo in zip(choices, pick):
                trial[members] = False
                trial[list(combo)] = True
            z = model.z(trial)
            if z > best_z:
                best, best_z = trial, z
        xf = best
    else:
        improved = True
        while improved:
            improved = False
            for members, combos in choices:
                rest = xf.copy()
                rest[members] = False
                gains = model.s + model.W @ rest.astype(float)
                current = tuple(c for c in members if xf[c])
                cur_val = combo_value(current, gains)
                vals = [combo_value(cb, gains) for cb in combos]
                k = int(np.argmax(vals))
                if vals[k] > cur_val + problem.ec.eps_sol * max(1.0, abs(cur_val)):
                    rest[list(combos[k])] = True
                    xf = rest
                    improved = True
    return make_solution(problem, problem.full_selection(xf), "reposition")


# -- connectivity optimisation ---------------------------------------------------------------

def _check_baselines(problem: ECProblem):
    bad = problem.model.bad_farm
    if bad is not None:
        raise ECConfigurationError(
            f"farm {bad} has baseline NPV {problem.baseline_farm_npvs[bad]:.6g} <= 0; "
            "the NPV-loss constraint is ill-posed")


def _greedy_fill(st: _State, eps: float, rng=None, ratio: bool = False):
    m = st.m
    while True:
        cols = np.nonzero(~st.x)[0]
        if len(cols) == 0:
            return
        gains = st.G[cols]
        ok = (gains > eps) & st.feasible_flips(cols)
        if not ok.any():
            return
        if ratio:
            loss = np.maximum(0.0, -st.farm_deltas(cols)).sum(axis=0)
            key = np.where(ok, gains / (loss + 1.0), -np.inf)
        else:
            key = np.where(ok, gains, -np.inf)
        st.flip(int(cols[int(np.argmax(key))]))


def _swap_search(st: _State, eps: float, max_passes: int = 50) -> _State:
    for _ in range(max_passes):
        improved = False
        sel = np.nonzero(st.x)[0]
        for i in sel[np.argsort(st.G[sel], kind="stable")]:
            if not st.x[i]:
                continue
            trial = st.copy()
            trial.flip(int(i))
            cols = np.nonzero(~trial.x)[0]
            cols = cols[cols != i]
            if len(cols) == 0:
                continue
            gain = trial.G[cols] - st.G[i]
            cand = gain > eps
            if not cand.any():
                continue
            cols, gain = cols[cand], gain[cand]
            ok = trial.feasible_flips(cols)
            if not ok.any():
                continue
            j = int(cols[ok][int(np.argmax(gain[ok]))])
            trial.flip(j)
            if trial.feasible():
                _greedy_fill(trial, eps)
                st = trial
                improved = True
        if not improved:
            return st
    return st


def _anneal(st: _State, ec: ECConfig, rng: np.random.Generator, eps: float) -> _State:
    """Metropolis sweeps over single flips, cooled geometrically; returns the best state seen."""
    m = st.m
    best = st.copy()
    temp = ec.anneal_initial_temp * max(float(np.mean(np.abs(m.s))) if m.nf else 1.0, 1e-12)
    order = np.arange(m.nf)
    stale = 0
    for _ in range(ec.anneal_sweeps):
        accepted = 0
        best_before = best.zval
        rng.shuffle(order)
        for c in order.tolist():
            # Metropolis with a pre-drawn uniform: accept iff dz >= floor
            u = rng.random()
            floor = temp * math.log(u) - eps if u > 0 else -math.inf
            dz = st.G[c] if not st.x[c] else -st.G[c]
            if dz < floor:
                continue
            z_before = st.zval
            adding = not st.x[c]
            st.flip(c)
            undo = [c]
            ok = st.feasible()
            if not ok and adding:
                ok = _repair_logged(st, c, undo, z_before + floor)
            if not ok:
                for q in reversed(undo):
                    st.flip(q)
                continue
            accepted += 1
            if st.zval > best.zval + eps:
                best = st.copy()
        st.resync()
        temp *= ec.anneal_cooling
        stale = stale + 1 if best.zval <= best_before else 0
        if accepted == 0 or stale >= ec.anneal_patience:
            break
    best.resync()
    return best


def _repair_logged(st: _State, protect: int, undo: list[int], z_floor: float) -> bool:
    """Deselect the lowest-marginal-Z helpful pieces on violating farms; False once Z drops below z_floor."""
    m = st.m
    for _ in range(m.nf):
        bad = np.nonzero(st.farm < m.check)[0]
        if len(bad) == 0:
            return True
        farm = int(bad[0])
        cols = np.nonzero(st.x & (m.farm_of[m.home] == farm))[0]
        cols = cols[cols != protect]
        if len(cols) == 0:
            return False
        helps = st.farm_deltas(cols)[farm] > 0
        if not helps.any():
            return False
        cols = cols[helps]
        q = int(cols[int(np.argmin(st.G[cols]))])
        st.flip(q)
        undo.append(q)
        if st.zval < z_floor:
            return False
    return st.feasible()


def optimize_connectivity(problem: ECProblem, ei_solution: EISolution | None = None,
                          start: ECSolution | None = None) -> ECSolution:
    """Heuristic maximisation of Z under the per-farm NPV-loss constraints.

    Starts from the repositioned EI layout when it is feasible (so the result
    never scores below repositioning), then greedy fill, pair swaps and
    seeded simulated-annealing restarts.
    """
    _check_baselines(problem)
    model = problem.model
    ec = problem.ec
    rng = np.random.default_rng(ec.seed)
    starts = []
    if start is not None:
        starts.append(start.x[problem.free])
    if ei_solution is not None or problem.ei_decisions is not None:
        starts.append(reposition(problem, ei_solution).x[problem.free])
    starts.append(np.zeros(model.nf, dtype=bool))

    best = None
    for xf in starts:
        st = model.state(xf)
        if not st.feasible():
            st = _make_feasible(st)
            if st is None:
                continue
        best = st
        break
    if best is None:
        raise ECInfeasibleError(f"configuration {problem.config.config_id}: no feasible start found "
                                f"for rho_max={ec.rho_max}")

    eps = ec.eps_sol * max(1.0, abs(best.zval))
    candidates = []
    for ratio in (False, True):
        st = best.copy()
        _greedy_fill(st, eps, ratio=ratio)
        candidates.append(_swap_search(st, eps))
    st = max(candidates, key=lambda s: s.zval)
    for _ in range(ec.anneal_restarts):
        annealed = _anneal(st.copy(), ec, rng, eps)
        _greedy_fill(annealed, eps)
        annealed = _swap_search(annealed, eps)
        if annealed.zval > st.zval + eps:
            st = annealed

    sol = make_solution(problem, problem.full_selection(st.x), "optimize")
    if not sol.feasible:
        # drift between the incremental model and the direct recalculation
        sol = make_solution(problem, problem.full_selection(best.x), "optimize")
    if not sol.feasible:
        raise ECInfeasibleError(f"configuration {problem.config.config_id}: farms {list(sol.violations)} "
                                "violate the NPV-loss limit after search")
    return sol


def _make_feasible(st: _State) -> _State | None:
    m = st.m
    for _ in range(4 * m.nf + 1):
        bad = np.nonzero(st.farm < m.check)[0]
        if len(bad) == 0:
            return st
        f = int(bad[0])
        cols = np.nonzero(m.farm_of[m.home] == f)[0]
        if len(cols) == 0:
            return None
        deltas = st.farm_deltas(cols)
        gain = deltas[f]
        others_ok = np.all((st.farm[:, None] + deltas >= m.check[:, None]) | (np.arange(len(st.farm)) == f)[:, None]
                           | (st.farm[:, None] < m.check[:, None]), axis=0)
        gain = np.where(others_ok, gain, -np.inf)
        k = int(np.argmax(gain))
        if not gain[k] > 0:
            return None
        st.flip(int(cols[k]))
    return st if st.feasible() else None


# -- exhaustive oracle ---------------------------------------------------------------------

def enumerate_oracle(problem: ECProblem, chunk: int = 1 << 15) -> ECSolution:
    """Global optimum of Z over every feasible selection of the free pieces."""
    _check_baselines(problem)
    model = problem.model
    n = model.nf
    if n > problem.ec.oracle_cap:
        raise OracleTooLargeError(f"{n} free pieces exceed the oracle cap of {problem.ec.oracle_cap}")
    nag = len(model.ag)
    arc_frac = np.zeros((n, nag))
    cell_frac = np.zeros((n, nag))
    for c in range(n):
        (arc_frac if model.is_arc[c] else cell_frac)[c, model.home[c]] = model.frac[c]
    best_z, best_code = -np.inf, None
    bits = 1 << np.arange(n, dtype=np.int64)
    for lo in range(0, 1 << n, chunk):
        codes = np.arange(lo, min(lo + chunk, 1 << n), dtype=np.int64)
        X = ((codes[:, None] & bits[None, :]) > 0).astype(float)
        z = model.z0 + X @ model.s + 0.5 * np.einsum("ij,ij->i", X @ model.W, X)
        fm, fh, S = X @ arc_frac, X @ cell_frac, X @ model.C.T
        A, ann = model.A, model.annuity
        N = (model.V * (1 - fh) * (model.base + S) - A * (fm * model.cmi + fh * model.chi)
             - ann * A * (fm * model.cmm + fh * model.chm + (1 - fh) * model.cam) + ann * model.pay * A * fh)
        farm = N @ model.farm_matrix.T + model.hab_npv
        ok = np.all(farm >= model.check[None, :], axis=1)
        if not ok.any():
            continue
        zk = np.where(ok, z, -np.inf)
        k = int(np.argmax(zk))
        if zk[k] > best_z:
            best_z, best_code = zk[k], int(codes[k])
    if best_code is None:
        raise ECInfeasibleError(f"configuration {problem.config.config_id}: no selection satisfies "
                                f"the NPV-loss limits at rho_max={problem.ec.rho_max}")
    xf = np.array([(best_code >> c) & 1 for c in range(n)], dtype=bool)
    return make_solution(problem, problem.full_selection(xf), "oracle")


# -- graph view and exports -------------------------------------------------------------------

def piece_graph(problem: ECProblem, solution: ECSolution) -> PieceGraph:
    x = solution.x
    cfg = problem.config
    nodes = tuple(Node(p.id, p.area, p.length, p.plot_id, cfg.plots[p.plot_id].farm_id)
                  for p in problem.pieces if x[p.id])
    edges = tuple((i, j) for i, j, _ in problem.adjacency if x[i] and x[j])
    return PieceGraph(nodes, edges)


def selected_pieces_geojson(problem: ECProblem, solution: ECSolution) -> bytes:
    feats = []
    for q in solution.selected:
        p = problem.pieces[q]
        feats.append({"type": "Feature", "geometry": shapely.geometry.mapping(p.geometry),
                      "properties": {"piece_id": p.id, "kind": p.kind.value, "plot_id": p.plot_id,
                                     "s_i": piece_score(p, problem.ec)}})
    doc = {"type": "FeatureCollection", "config_id": problem.config.config_id,
           "mode": solution.mode, "features": feats}
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


FARM_CSV_HEADER = ("farm_id", "N_f_base", "N_f_new", "loss_ratio", "Z")


def farm_csv(solution: ECSolution) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FARM_CSV_HEADER)
    for f in sorted(solution.farm_npvs):
        w.writerow([f, repr(solution.baseline_farm_npvs[f]), repr(solution.farm_npvs[f]),
                    repr(solution.loss_ratio(f)), repr(solution.z)])
    return buf.getvalue()
