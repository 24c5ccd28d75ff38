"""Farm-level ecological intensification (EI) model.

Each agricultural plot ``i`` chooses a margin fraction ``m_i`` and a habitat
conversion fraction ``h_i`` in [0, 1]. Margins and habitats raise the yield of
nearby plots through pollination and pest-suppression terms that decay with
centroid distance and accumulate over time; the objective is the discounted
NPV of all plots minus ``lambda * sum(m^2 + h^2)``.

Two evaluation routes exist. The per-plot functions (``pollination_effect``,
``plot_npv_agricultural``, ``ei_objective``...) follow the year-by-year
formulas literally. ``QuadraticNPVModel`` collapses the time sums into
matrices, which makes the objective an explicit quadratic in (m, h); the
solver uses it for speed and the tests check the two routes against each
other.
"""

from __future__ import annotations

import csv
import io
import math
from functools import cached_property
from dataclasses import dataclass, field, replace

import numpy as np

from .landscape import LandscapeConfiguration
from .params import CropParams, EconomicParams, EIParams, ParameterError


def time_accumulation(rate: float, t: float) -> float:
    return 1.0 - math.exp(-rate * t)


def accumulated_discount(rate: float, econ: EconomicParams) -> float:
    """sum_t (1 - exp(-rate t)) / (1 + r)^t over t = 1..T."""
    factors = [time_accumulation(rate, t) for t in range(1, int(econ.horizon) + 1)]
    return sum(f * d for f, d in zip(factors, econ.discount_factors()))


@dataclass(frozen=True)
class PlotEconomics:
    """Per-plot prices, costs and bounds; policies modify these."""
    price: float
    c_m_impl: float
    c_h_impl: float
    c_m_maint: float
    c_h_maint: float
    c_ag_maint: float
    habitat_payment: float = 0.0  # USD / ha / yr paid on converted area
    m_lower: float = 0.0
    h_lower: float = 0.0


def plot_economics(config: LandscapeConfiguration, params: EIParams) -> dict[int, PlotEconomics]:
    e = params.economics
    out = {}
    for pid in config.agricultural_ids:
        crop = params.crop(config.plots[pid].label)
        out[pid] = PlotEconomics(crop.price, e.c_m_impl, e.c_h_impl, e.c_m_maint,
                                 e.c_h_maint, e.c_ag_maint)
    return out


@dataclass(frozen=True)
class EIDecision:
    plot_ids: tuple[int, ...]
    m: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        h = np.asarray(self.h, dtype=float)
        if m.shape != (len(self.plot_ids),) or h.shape != m.shape:
            raise ValueError("m and h need one entry per plot id")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "h", h)

    @classmethod
    def zeros(cls, config: LandscapeConfiguration) -> "EIDecision":
        ids = tuple(config.agricultural_ids)
        return cls(ids, np.zeros(len(ids)), np.zeros(len(ids)))

    @classmethod
    def from_mapping(cls, config, values: dict[int, tuple[float, float]]) -> "EIDecision":
        ids = tuple(config.agricultural_ids)
        m = [values.get(i, (0.0, 0.0))[0] for i in ids]
        h = [values.get(i, (0.0, 0.0))[1] for i in ids]
        return cls(ids, np.array(m, dtype=float), np.array(h, dtype=float))

    def of(self, plot_id: int) -> tuple[float, float]:
        try:
            k = self.plot_ids.index(plot_id)
        except ValueError:
            return (0.0, 0.0)
        return float(self.m[k]), float(self.h[k])

    def as_mapping(self) -> dict[int, tuple[float, float]]:
        return {pid: (float(a), float(b)) for pid, a, b in zip(self.plot_ids, self.m, self.h)}


# -- direct, year-by-year formulas -----------------------------------------------------------

def _sources(config: LandscapeConfiguration, params: EIParams, i: int):
    """Plots whose interventions reach plot i, and existing habitats nearby."""
    d_neib = params.economics.d_neib
    if config.d_neib == d_neib:
        nbrs = config.neighbor_sets[i]
    else:
        row = config.distance_matrix[i]
        nbrs = tuple(int(j) for j in np.nonzero(row <= d_neib)[0] if j != i)
    if params.neighbor_scope == "farm":
        farm = config.plots[i].farm_id
        nbrs = tuple(j for j in nbrs if config.plots[j].farm_id == farm)
    agri = [i] + [j for j in nbrs if config.plots[j].is_agricultural]
    hab = [j for j in nbrs if not config.plots[j].is_agricultural]
    return agri, hab


def _service(i, decisions, t, config, params, strength, decay, accum, strength_h, decay_h, accum_h):
    crop = params.crop(config.plots[i].label)
    a, b, g = getattr(crop, strength), getattr(crop, decay), getattr(crop, accum)
    ah, bh, gh = getattr(crop, strength_h), getattr(crop, decay_h), getattr(crop, accum_h)
    agri, hab = _sources(config, params, i)
    d = config.distance_matrix
    total = 0.0
    for j in agri:
        mj, hj = decisions.of(j)
        dij = 0.0 if j == i else d[i, j]
        total += a * mj * math.exp(-b * dij) * time_accumulation(g, t)
        total += ah * hj * math.exp(-bh * dij) * time_accumulation(gh, t)
    for k in hab:
        total += ah * math.exp(-bh * d[i, k]) * time_accumulation(gh, t)
    return total


def pollination_effect(i: int, decisions: EIDecision, t: float, config, params: EIParams) -> float:
    return _service(i, decisions, t, config, params,
                    "alpha", "beta", "gamma", "alpha_h", "beta_h", "gamma_h")


def pest_effect(i: int, decisions: EIDecision, t: float, config, params: EIParams) -> float:
    return _service(i, decisions, t, config, params,
                    "delta", "epsilon", "zeta", "delta_h", "epsilon_h", "zeta_h")


def combined_yield(i: int, decisions: EIDecision, t: float, config, params: EIParams) -> float:
    p = pollination_effect(i, decisions, t, config, params)
    s = pest_effect(i, decisions, t, config, params)
    return config.plots[i].base_yield * (1.0 + p + s)


def plot_npv_agricultural(i: int, decisions: EIDecision, config, params: EIParams,
                          econ: PlotEconomics | None = None) -> float:
    plot = config.plots[i]
    if not plot.is_agricultural:
        raise ValueError(f"plot {i} is not agricultural")
    if econ is None:
        econ = plot_economics(config, params)[i]
    A = plot.area
    m, h = decisions.of(i)
    r = params.economics.discount_rate
    npv = -A * (m * econ.c_m_impl + h * econ.c_h_impl)
    for t in range(1, int(params.economics.horizon) + 1):
        revenue = combined_yield(i, decisions, t, config, params) * econ.price * A * (1.0 - h)
        maint = A * (m * econ.c_m_maint + h * econ.c_h_maint + (1.0 - h) * econ.c_ag_maint)
        payment = econ.habitat_payment * A * h
        npv += (revenue - maint + payment) / (1.0 + r) ** t
    return npv


def plot_npv_habitat(area_ha: float, econ: EconomicParams) -> float:
    r = econ.discount_rate
    return sum(-area_ha * econ.c_exist_hab / (1.0 + r) ** t for t in range(1, int(econ.horizon) + 1))


def ei_objective(config: LandscapeConfiguration, decisions: EIDecision, params: EIParams,
                 economics: dict[int, PlotEconomics] | None = None) -> float:
    economics = economics or plot_economics(config, params)
    total = 0.0
    for p in config.plots:
        if p.is_agricultural:
            total += plot_npv_agricultural(p.id, decisions, config, params, economics[p.id])
        else:
            total += plot_npv_habitat(p.area, params.economics)
    lam = params.economics.penalty
    return total - lam * float(np.sum(decisions.m ** 2) + np.sum(decisions.h ** 2))


# -- quadratic model used by the solver ------------------------------------------------------

@dataclass(frozen=True)
class Mandate:
    """Farm-level minimum converted-habitat area (ha), enforced by a penalty ramp."""
    min_area: float
    groups: tuple[tuple[int, ...], ...]  # indices into the model's plot order, per farm
    weight: float = 1e3  # USD / ha^2; the projection closes any residual gap


class QuadraticNPVModel:
    """Closed-form plot NPVs for all agricultural plots of a configuration.

    With V_i = Y_base,i * p_i * A_i the discounted revenue of plot i is
    ``V_i (1 - h_i) (b_i + (Wm m)_i + (Wh h)_i)``, where ``b_i`` holds the annuity plus
    the existing-habitat services and Wm, Wh hold the time-summed service kernels.
    """

    def __init__(self, config: LandscapeConfiguration, params: EIParams,
                 economics: dict[int, PlotEconomics] | None = None, mandate: Mandate | None = None):
        economics = economics or plot_economics(config, params)
        e = params.economics
        ids = config.agricultural_ids
        self.plot_ids = tuple(ids)
        n = len(ids)
        self.annuity = e.annuity
        self.penalty = e.penalty
        self.mandate = mandate
        ec = [economics[i] for i in ids]
        self.area = np.array([config.plots[i].area for i in ids])
        self.value = np.array([config.plots[i].base_yield * x.price for i, x in zip(ids, ec)]) * self.area
        self.c_m_impl = np.array([x.c_m_impl for x in ec])
        self.c_h_impl = np.array([x.c_h_impl for x in ec])
        self.c_m_maint = np.array([x.c_m_maint for x in ec])
        self.c_h_maint = np.array([x.c_h_maint for x in ec])
        self.c_ag_maint = np.array([x.c_ag_maint for x in ec])
        self.payment = np.array([x.habitat_payment for x in ec])
        self.lower = np.concatenate([[x.m_lower for x in ec], [x.h_lower for x in ec]])

        pos = {pid: k for k, pid in enumerate(ids)}
        self.Wm = np.zeros((n, n))
        self.Wh = np.zeros((n, n))
        self.base = np.full(n, self.annuity)
        d = config.distance_matrix
        cache: dict[float, float] = {}

        def acc(rate):
            if rate not in cache:
                cache[rate] = accumulated_discount(rate, e)
            return cache[rate]

        for a, i in enumerate(ids):
            crop = params.crop(config.plots[i].label)
            agri, hab = _sources(config, params, i)
            for j in agri:
                dij = 0.0 if j == i else d[i, j]
                b = pos[j]
                self.Wm[a, b] = _kernel(crop, dij, acc, habitat=False)
                self.Wh[a, b] = _kernel(crop, dij, acc, habitat=True)
            for k in hab:
                self.base[a] += _kernel(crop, d[i, k], acc, habitat=True)
        self.habitat_npv = sum(plot_npv_habitat(config.plots[k].area, e) for k in config.habitat_ids)

    @property
    def n(self) -> int:
        return len(self.plot_ids)

    def split(self, x):
        return x[: self.n], x[self.n:]

    def service(self, m, h):
        return self.base + self.Wm @ m + self.Wh @ h

    def plot_npvs(self, m, h) -> np.ndarray:
        A, ann = self.area, self.annuity
        cost = A * (m * self.c_m_impl + h * self.c_h_impl)
        maint = ann * A * (m * self.c_m_maint + h * self.c_h_maint + (1.0 - h) * self.c_ag_maint)
        return self.value * (1.0 - h) * self.service(m, h) - cost - maint + ann * self.payment * A * h

    @cached_property
    def _mandate_matrix(self) -> np.ndarray:
        """Farm-membership rows scaled by plot area, so ``M @ h`` is converted area per farm."""
        M = np.zeros((len(self.mandate.groups), self.n))
        for r, g in enumerate(self.mandate.groups):
            M[r, list(g)] = self.area[list(g)]
        return M

    def _mandate_gap(self, h):
        return np.maximum(0.0, self.mandate.min_area - self._mandate_matrix @ h)

    def objective(self, x) -> float:
        m, h = self.split(x)
        val = float(self.plot_npvs(m, h).sum()) + self.habitat_npv - self.penalty * float(x @ x)
        if self.mandate is not None and self.mandate.min_area > 0:
            val -= self.mandate.weight * float(np.sum(self._mandate_gap(h) ** 2))
        return val

    def gradient(self, x, with_mandate: bool = True) -> np.ndarray:
        m, h = self.split(x)
        A, ann = self.area, self.annuity
        keep = self.value * (1.0 - h)
        gm = self.Wm.T @ keep - A * (self.c_m_impl + ann * self.c_m_maint) - 2 * self.penalty * m
        gh = (self.Wh.T @ keep - self.value * self.service(m, h)
              - A * (self.c_h_impl + ann * (self.c_h_maint - self.c_ag_maint))
              + ann * self.payment * A - 2 * self.penalty * h)
        if with_mandate and self.mandate is not None and self.mandate.min_area > 0:
            gh += 2 * self.mandate.weight * (self._mandate_matrix.T @ self._mandate_gap(h))
        return np.concatenate([gm, gh])


def _kernel(crop: CropParams, dist: float, acc, habitat: bool) -> float:
    if habitat:
        return (crop.alpha_h * math.exp(-crop.beta_h * dist) * acc(crop.gamma_h)
                + crop.delta_h * math.exp(-crop.epsilon_h * dist) * acc(crop.zeta_h))
    return (crop.alpha * math.exp(-crop.beta * dist) * acc(crop.gamma)
            + crop.delta * math.exp(-crop.epsilon * dist) * acc(crop.zeta))


# -- solver ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 10_000
    tolerance: float = 1e-8  # projected-gradient inf-norm <= tol * (1 + |f|)
    armijo: float = 1e-4
    shrink: float = 0.5
    multistart: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1 or self.multistart < 1:
            raise ValueError("max_iterations and multistart must be positive")
        if self.tolerance <= 0 or not 0 < self.shrink < 1 or not 0 < self.armijo < 1:
            raise ValueError("invalid line-search or tolerance settings")


@dataclass(frozen=True)
class AscentResult:
    x: np.ndarray
    value: float
    iterations: int
    pg_norm: float
    converged: bool


def projected_gradient_norm(x, g, lo, hi) -> float:
    pg = np.where(x <= lo, np.maximum(g, 0.0), np.where(x >= hi, np.minimum(g, 0.0), g))
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def projected_gradient_ascent(fun, grad, x0, lo, hi, cfg: SolverConfig) -> AscentResult:
    """Maximise ``fun`` over the box [lo, hi].

    Spectral (Barzilai-Borwein) trial steps, Armijo backtracking along the
    projection arc, so accepted iterates never decrease the objective.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f = fun(x)
    g = grad(x)
    step = 1.0 / max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
    pg = projected_gradient_norm(x, g, lo, hi)
    it = 0
    while it < cfg.max_iterations:
        if pg <= cfg.tolerance * (1.0 + abs(f)):
            return AscentResult(x, f, it, pg, True)
        it += 1
        a = step
        while True:
            x_new = np.clip(x + a * g, lo, hi)
            f_new = fun(x_new)
            if f_new >= f + cfg.armijo * float(g @ (x_new - x)):
                break
            a *= cfg.shrink
            if a < 1e-30:
                return AscentResult(x, f, it, pg, False)
        s = x_new - x
        g_new = grad(x_new)
        y = g_new - g
        sy = float(s @ y)
        step = float(s @ s) / -sy if sy < 0 else 1e6
        step = min(max(step, 1e-12), 1e6)
        x, f, g = x_new, f_new, g_new
        pg = projected_gradient_norm(x, g, lo, hi)
    return AscentResult(x, f, it, pg, pg <= cfg.tolerance * (1.0 + abs(f)))


@dataclass(frozen=True)
class SolverDiagnostics:
    iterations: int
    pg_norm: float
    restarts: int
    converged: bool
    start_values: tuple[float, ...] = ()


@dataclass(frozen=True)
class EISolution:
    decisions: EIDecision
    plot_npvs: dict[int, float]
    farm_npvs: dict[int, float]
    objective: float
    diagnostics: SolverDiagnostics

    def to_dict(self) -> dict:
        return {
            "plot_ids": list(self.decisions.plot_ids),
            "m": self.decisions.m.tolist(),
            "h": self.decisions.h.tolist(),
            "plot_npvs": {str(k): v for k, v in self.plot_npvs.items()},
            "farm_npvs": {str(k): v for k, v in self.farm_npvs.items()},
            "objective": self.objective,
            "diagnostics": {"iterations": self.diagnostics.iterations,
                            "pg_norm": self.diagnostics.pg_norm,
                            "restarts": self.diagnostics.restarts,
                            "converged": self.diagnostics.converged,
                            "start_values": list(self.diagnostics.start_values)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EISolution":
        diag = d.get("diagnostics", {})
        return cls(
            EIDecision(tuple(d["plot_ids"]), np.array(d["m"], dtype=float), np.array(d["h"], dtype=float)),
            {int(k): float(v) for k, v in d["plot_npvs"].items()},
            {int(k): float(v) for k, v in d["farm_npvs"].items()},
            float(d["objective"]),
            SolverDiagnostics(int(diag.get("iterations", 0)), float(diag.get("pg_norm", 0.0)),
                              int(diag.get("restarts", 0)), bool(diag.get("converged", True)),
                              tuple(diag.get("start_values", ()))),
        )


def _start_points(n: int, lo: np.ndarray, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    ones, zeros = np.ones(n), np.zeros(n)
    corners = [np.zeros(2 * n), np.ones(2 * n), np.concatenate([ones, zeros]), np.concatenate([zeros, ones])]
    starts = corners[:count]
    while len(starts) < count:
        starts.append(rng.uniform(0.0, 1.0, 2 * n))
    return [np.maximum(s, lo) for s in starts]


def solve_ei(config: LandscapeConfiguration, params: EIParams, solver: SolverConfig | None = None,
             economics: dict[int, PlotEconomics] | None = None,
             mandate: Mandate | None = None) -> EISolution:
    solver = solver or SolverConfig()
    economics = economics or plot_economics(config, params)
    model = QuadraticNPVModel(config, params, economics, mandate)
    n = model.n
    if n == 0:
        raise ValueError(f"configuration {config.config_id} has no agricultural plots")
    lo = model.lower
    hi = np.ones(2 * n)
    if np.any(lo > hi):
        raise ValueError("lower bounds exceed 1")
    rng = np.random.default_rng(solver.seed)
    best = None
    starts = _start_points(n, lo, solver.multistart, rng)
    start_values = []
    total_iters = 0
    for x0 in starts:
        start_values.append(model.objective(x0))
        res = projected_gradient_ascent(model.objective, model.gradient, x0, lo, hi, solver)
        total_iters += res.iterations
        if best is None or res.value > best.value:
            best = res
    x = best.x
    if mandate is not None and mandate.min_area > 0:
        x = _enforce_mandate(model, x, mandate)
    m, h = model.split(x.copy())
    decisions = EIDecision(model.plot_ids, m, h)
    return _assemble(config, params, model, decisions, SolverDiagnostics(
        total_iters, best.pg_norm, len(starts), best.converged, tuple(start_values)))


def _enforce_mandate(model: QuadraticNPVModel, x: np.ndarray, mandate: Mandate) -> np.ndarray:
    """Raise h on the plots with the smallest marginal loss per hectare until each farm complies."""
    x = x.copy()
    n = model.n
    for group in mandate.groups:
        idx = list(group)
        while True:
            h = x[n:]
            gap = mandate.min_area - float(np.dot(h[idx], model.area[idx]))
            if gap <= 1e-12:
                break
            g = model.gradient(x, with_mandate=False)[n:]
            open_ = [k for k in idx if h[k] < 1.0]
            if not open_:
                break
            k = min(open_, key=lambda j: (-g[j] / model.area[j], j))
            x[n + k] = min(1.0, h[k] + gap / model.area[k])
    return x


def _assemble(config, params, model: QuadraticNPVModel, decisions: EIDecision,
              diagnostics: SolverDiagnostics) -> EISolution:
    npv = model.plot_npvs(decisions.m, decisions.h)
    plot_npvs = {pid: float(v) for pid, v in zip(model.plot_ids, npv)}
    for k in config.habitat_ids:
        plot_npvs[k] = plot_npv_habitat(config.plots[k].area, params.economics)
    plot_npvs = dict(sorted(plot_npvs.items()))
    farm_npvs = {f.id: float(sum(plot_npvs[p] for p in f.plot_ids)) for f in config.farms}
    lam = params.economics.penalty
    objective = float(sum(plot_npvs.values())) - lam * float(decisions.m @ decisions.m + decisions.h @ decisions.h)
    return EISolution(decisions, plot_npvs, farm_npvs, objective, diagnostics)


def evaluate_decisions(config, params, decisions: EIDecision,
                       economics: dict[int, PlotEconomics] | None = None) -> EISolution:
    """Wrap fixed decisions in an EISolution (no optimisation)."""
    model = QuadraticNPVModel(config, params, economics)
    return _assemble(config, params, model, decisions, SolverDiagnostics(0, float("nan"), 0, True))


# -- sensitivity -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SensitivityRow:
    parameter: str
    sample: int
    multiplier: float
    mean_margin: float
    mean_habitat: float
    pearson_r: float


def scale_params(params: EIParams, multipliers: dict[str, float]) -> EIParams:
    """Apply multipliers keyed ``'<crop>.<field>'`` or ``'economics.<field>'``."""
    crops = dict(params.crops)
    econ = params.economics
    for key, mult in multipliers.items():
        owner, _, name = key.rpartition(".")
        if owner == "economics":
            if not hasattr(econ, name):
                raise ParameterError(f"unknown economic parameter {name!r}")
            econ = replace(econ, **{name: getattr(econ, name) * mult})
        elif owner in crops and hasattr(crops[owner], name):
            crops[owner] = replace(crops[owner], **{name: getattr(crops[owner], name) * mult})
        else:
            raise ParameterError(f"unknown parameter {key!r}")
    return replace(params, crops=crops, economics=econ)


def sensitivity_sweep(config, params: EIParams, multiplier_ranges: dict[str, tuple[float, float]],
                      n_samples: int = 20, seed: int = 0, solver: SolverConfig | None = None,
                      correlate_with: str = "margin") -> list[SensitivityRow]:
    """Re-solve under simultaneous random multipliers and correlate each with the mean fraction."""
    from .metrics import UndefinedCorrelationError, pearson

    if correlate_with not in ("margin", "habitat"):
        raise ValueError("correlate_with must be 'margin' or 'habitat'")
    rng = np.random.default_rng(seed)
    names = list(multiplier_ranges)
    samples = []
    for _ in range(n_samples):
        mult = {k: float(rng.uniform(*multiplier_ranges[k])) for k in names}
        sol = solve_ei(config, scale_params(params, mult), solver)
        samples.append((mult, float(np.mean(sol.decisions.m)), float(np.mean(sol.decisions.h))))
    r = {}
    for k in names:
        xs = [s[0][k] for s in samples]
        ys = [s[1] if correlate_with == "margin" else s[2] for s in samples]
        try:
            r[k] = pearson(xs, ys)
        except UndefinedCorrelationError:
            r[k] = float("nan")
    return [SensitivityRow(k, si, s[0][k], s[1], s[2], r[k]) for si, s in enumerate(samples) for k in names]


SENSITIVITY_HEADER = ("parameter", "multiplier", "mean_margin", "mean_habitat", "pearson_r")


def sensitivity_csv(rows: list[SensitivityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SENSITIVITY_HEADER)
    for row in rows:
        w.writerow([row.parameter, repr(row.multiplier), repr(row.mean_margin),
                    repr(row.mean_habitat), repr(row.pearson_r)])
    return buf.getvalue()
