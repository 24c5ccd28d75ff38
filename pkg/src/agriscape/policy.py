"""Policy instruments, policy-conditioned farm response, cost accounting and evaluation.

A policy vector theta holds 13 components: establishment and maintenance
subsidy factors for margins and habitat, a per-hectare habitat payment, two
mandates (minimum converted area per farm, minimum margin fraction on
habitat-adjacent plots), and one eco-premium multiplier per crop.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .ec import ECConfig, ECProblem, ECSolution, Piece, build_adjacency, discretize, reposition
from .ei import EISolution, Mandate, PlotEconomics, QuadraticNPVModel, SolverConfig, plot_economics, solve_ei
from .landscape import LandscapeConfiguration
from .params import CROPS, EIParams


class PolicyError(ValueError):
    pass


class MandateInfeasibleError(ValueError):
    pass


SCALAR_FIELDS = ("s_est_m", "s_est_h", "s_maint_m", "s_maint_h", "p_ha", "m_area", "m_frac")
PREMIUM_NAMES = tuple(f"e[{c}]" for c in CROPS)
PARAMETER_NAMES = SCALAR_FIELDS + PREMIUM_NAMES
SCALAR_BOUNDS = {
    "s_est_m": (0.0, 0.5), "s_est_h": (0.0, 0.5),
    "s_maint_m": (0.0, 0.5), "s_maint_h": (0.0, 0.5),
    "p_ha": (0.0, 150.0), "m_area": (0.0, 10.0), "m_frac": (0.0, 0.3),
}
PREMIUM_BOUNDS = (1.0, 1.3)


def policy_bounds() -> np.ndarray:
    """(13, 2) array of lower/upper bounds in parameter order."""
    rows = [SCALAR_BOUNDS[n] for n in SCALAR_FIELDS] + [PREMIUM_BOUNDS] * len(CROPS)
    return np.array(rows, dtype=float)


@dataclass(frozen=True)
class PolicyParams:
    s_est_m: float = 0.0
    s_est_h: float = 0.0
    s_maint_m: float = 0.0
    s_maint_h: float = 0.0
    p_ha: float = 0.0
    m_area: float = 0.0
    m_frac: float = 0.0
    premiums: tuple[float, ...] = (1.0,) * len(CROPS)  # CROPS order

    def __post_init__(self):
        object.__setattr__(self, "premiums", tuple(float(v) for v in self.premiums))
        if len(self.premiums) != len(CROPS):
            raise PolicyError(f"need {len(CROPS)} eco-premiums, got {len(self.premiums)}")
        for name in SCALAR_FIELDS:
            lo, hi = SCALAR_BOUNDS[name]
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise PolicyError(f"{name}={v} outside [{lo}, {hi}]")
        for crop, v in zip(CROPS, self.premiums):
            if not PREMIUM_BOUNDS[0] <= v <= PREMIUM_BOUNDS[1]:
                raise PolicyError(f"eco-premium for {crop}={v} outside {list(PREMIUM_BOUNDS)}")

    @classmethod
    def identity(cls) -> "PolicyParams":
        return cls()

    def premium(self, crop: str) -> float:
        return self.premiums[CROPS.index(crop)]

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in SCALAR_FIELDS] + list(self.premiums), dtype=float)

    @classmethod
    def from_vector(cls, v) -> "PolicyParams":
        v = [float(a) for a in np.asarray(v, dtype=float).ravel()]
        if len(v) != len(PARAMETER_NAMES):
            raise PolicyError(f"policy vector needs {len(PARAMETER_NAMES)} entries, got {len(v)}")
        return cls(*v[:7], premiums=tuple(v[7:]))

    def to_dict(self) -> dict[str, float]:
        return dict(zip(PARAMETER_NAMES, self.to_vector().tolist()))

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        unknown = set(d) - set(PARAMETER_NAMES)
        if unknown:
            raise PolicyError(f"unknown policy parameters {sorted(unknown)}")
        base = cls().to_dict()
        base.update(d)
        return cls.from_vector([base[n] for n in PARAMETER_NAMES])


# -- applying a policy -------------------------------------------------------------------------

def plot_policy_economics(base: PlotEconomics, theta: PolicyParams, crop: str, qualifies: bool) -> PlotEconomics:
    """Per-plot prices, costs and bounds under theta."""
    out = replace(
        base,
        price=base.price * theta.premium(crop),
        c_m_maint=base.c_m_maint * (1.0 - theta.s_maint_m),
        c_h_maint=base.c_h_maint * (1.0 - theta.s_maint_h),
        habitat_payment=base.habitat_payment + theta.p_ha,
    )
    if qualifies:
        out = replace(out, c_m_impl=base.c_m_impl * (1.0 - theta.s_est_m),
                      c_h_impl=base.c_h_impl * (1.0 - theta.s_est_h),
                      m_lower=max(base.m_lower, theta.m_frac))
    return out


@dataclass(frozen=True)
class PolicyTerms:
    economics: dict[int, PlotEconomics]
    qualifying: frozenset[int]  # agricultural plots touching existing habitat
    mandate: Mandate | None


def apply_policy(config: LandscapeConfiguration, params: EIParams, theta: PolicyParams) -> PolicyTerms:
    base = plot_economics(config, params)
    touching = config.touches_habitat
    qualifying = frozenset(p for p in config.agricultural_ids if touching[p])
    econ = {p: plot_policy_economics(base[p], theta, config.plots[p].label, p in qualifying) for p in base}
    mandate = None
    if theta.m_area > 0:
        pos = {pid: k for k, pid in enumerate(config.agricultural_ids)}
        groups = []
        for farm in config.farms:
            idx = tuple(pos[p] for p in farm.plot_ids if p in pos)
            if not idx:
                continue  # nothing to convert on an all-habitat farm
            ag_area = sum(config.plots[p].area for p in farm.plot_ids if p in pos)
            if theta.m_area > ag_area:
                raise MandateInfeasibleError(
                    f"farm {farm.id}: mandated {theta.m_area} ha exceeds its {ag_area:.4f} ha of cropland")
            groups.append(idx)
        mandate = Mandate(theta.m_area, tuple(groups))
    return PolicyTerms(econ, qualifying, mandate)


def farm_response(config: LandscapeConfiguration, params: EIParams, theta: PolicyParams,
                  solver: SolverConfig | None = None, terms: PolicyTerms | None = None) -> EISolution:
    terms = terms or apply_policy(config, params, theta)
    return solve_ei(config, params, solver, economics=terms.economics, mandate=terms.mandate)


# -- cost ------------------------------------------------------------------------------------

COST_ITEMS = ("establishment_margin", "establishment_habitat", "maintenance_margin",
              "maintenance_habitat", "habitat_payment", "eco_premium")


@dataclass(frozen=True)
class PolicyCost:
    items: dict[int, dict[str, float]]  # farm -> item -> discounted USD
    farm_totals: dict[int, float]
    total: float


def policy_cost(config: LandscapeConfiguration, params: EIParams, solution: EISolution,
                theta: PolicyParams, include_premium: bool = True) -> PolicyCost:
    """Discounted agency expenditure per farm: one-time establishment subsidies at t=0,
    the rest paid yearly over the horizon."""
    base = plot_economics(config, params)
    touching = config.touches_habitat
    ann = params.economics.annuity
    d = solution.decisions
    service = QuadraticNPVModel(config, params).service(d.m, d.h)
    per_plot = {}
    for k, pid in enumerate(d.plot_ids):
        plot = config.plots[pid]
        A, m, h = plot.area, float(d.m[k]), float(d.h[k])
        b = base[pid]
        q = bool(touching[pid])
        revenue = plot.base_yield * b.price * A * (1.0 - h) * float(service[k])
        per_plot[pid] = {
            "establishment_margin": theta.s_est_m * b.c_m_impl * A * m if q else 0.0,
            "establishment_habitat": theta.s_est_h * b.c_h_impl * A * h if q else 0.0,
            "maintenance_margin": ann * theta.s_maint_m * b.c_m_maint * A * m,
            "maintenance_habitat": ann * theta.s_maint_h * b.c_h_maint * A * h,
            "habitat_payment": ann * theta.p_ha * A * h,
            "eco_premium": (theta.premium(plot.label) - 1.0) * revenue if include_premium else 0.0,
        }
    items = {}
    for farm in config.farms:
        items[farm.id] = {name: float(sum(per_plot[p][name] for p in farm.plot_ids if p in per_plot))
                          for name in COST_ITEMS}
    totals = {f: float(sum(v.values())) for f, v in items.items()}
    return PolicyCost(items, totals, float(sum(totals.values())))


# -- evaluation ------------------------------------------------------------------------------

@dataclass(frozen=True)
class BOConfig:
    w_c: float = 1.0
    w_npv: float = 0.0
    n_samples: int = 20
    n_init: int = 15
    n_calls: int = 100
    b_max: float = 500_000.0
    penalty: float = 1e15
    seed: int = 0
    n_candidates: int = 1000
    n_refine: int = 5
    clip_factor: float = 10.0
    include_premium_cost: bool = True
    top_k: int = 10
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.n_init < self.n_calls:
            raise ValueError("need 1 <= n_init < n_calls")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.w_c < 0 or self.w_npv < 0:
            raise ValueError("weights must be >= 0")

    @classmethod
    def from_dict(cls, data: dict | None) -> "BOConfig":
        return cls(**(data or {}))


@dataclass(frozen=True)
class Targets:
    config_id: int
    z: float
    farm_npvs: dict[int, float]

    @classmethod
    def from_solution(cls, config_id: int, solution: ECSolution) -> "Targets":
        return cls(config_id, solution.z, dict(solution.farm_npvs))

    def to_dict(self) -> dict:
        return {"config_id": self.config_id, "z": self.z,
                "farm_npvs": {str(k): v for k, v in self.farm_npvs.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "Targets":
        return cls(int(d["config_id"]), float(d["z"]), {int(k): float(v) for k, v in d["farm_npvs"].items()})


@dataclass(frozen=True)
class PolicyCase:
    """One configuration prepared for repeated policy evaluation (pieces cut once)."""
    config: LandscapeConfiguration
    params: EIParams
    ec: ECConfig
    target: Targets
    pieces: tuple[Piece, ...]
    adjacency: tuple[tuple[int, int, float], ...]
    solver: SolverConfig = field(default_factory=SolverConfig)

    @classmethod
    def prepare(cls, config, params: EIParams, ec: ECConfig, target: Targets,
                solver: SolverConfig | None = None) -> "PolicyCase":
        pieces = tuple(discretize(config, ec))
        return cls(config, params, ec, target, pieces, tuple(build_adjacency(pieces, ec.d_adj, ec.alpha_al)),
                   solver or SolverConfig())


@dataclass(frozen=True)
class ConfigEvaluation:
    config_id: int
    z: float
    farm_npvs: dict[int, float]
    cost: float
    cost_items: dict[int, dict[str, float]]
    deviation_c: float
    deviation_npv: float
    contribution: float
    fractions: dict[int, tuple[float, float]] = field(default_factory=dict)
    error: str | None = None


@dataclass(frozen=True)
class PolicyEvaluation:
    theta: PolicyParams
    objective: float
    configs: tuple[ConfigEvaluation, ...]
    mean_cost: float
    mean_npv: float
    mean_connectivity: float
    over_budget: bool

    @property
    def penalized(self) -> bool:
        return self.over_budget or any(c.error is not None for c in self.configs)


def evaluate_case(theta: PolicyParams, case: PolicyCase, bo: BOConfig) -> ConfigEvaluation:
    cfg = case.config
    try:
        terms = apply_policy(cfg, case.params, theta)
    except MandateInfeasibleError as exc:
        return ConfigEvaluation(cfg.config_id, float("nan"), {}, 0.0, {}, float("nan"), float("nan"),
                                bo.penalty, error=str(exc))
    response = farm_response(cfg, case.params, theta, case.solver, terms)
    problem = ECProblem(cfg, case.params, case.ec, case.pieces, case.adjacency,
                        dict(case.target.farm_npvs), terms.economics, response.decisions)
    placed = reposition(problem)
    cost = policy_cost(cfg, case.params, response, theta, bo.include_premium_cost)
    dev_c = abs(placed.z - case.target.z)
    farms = sorted(case.target.farm_npvs)
    dev_npv = float(np.mean([abs(placed.farm_npvs[f] - case.target.farm_npvs[f]) for f in farms])) if farms else 0.0
    return ConfigEvaluation(cfg.config_id, placed.z, dict(placed.farm_npvs), cost.total, cost.items,
                            dev_c, dev_npv, bo.w_c * dev_c + bo.w_npv * dev_npv, dict(placed.fractions))


def _evaluate_case_args(args):
    return evaluate_case(*args)


def evaluate_policy(theta: PolicyParams, cases, bo: BOConfig, workers: int | None = None) -> PolicyEvaluation:
    """Mean weighted deviation from the targets; the penalty value when the mean cost exceeds B_max."""
    cases = list(cases)
    if not cases:
        raise ValueError("need at least one configuration")
    workers = bo.workers if workers is None else workers
    if workers > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = tuple(pool.map(_evaluate_case_args, [(theta, c, bo) for c in cases]))
    else:
        results = tuple(evaluate_case(theta, c, bo) for c in cases)
    ok = [r for r in results if r.error is None]
    mean_cost = float(np.mean([r.cost for r in ok])) if ok else 0.0
    mean_npv = float(np.mean([sum(r.farm_npvs.values()) for r in ok])) if ok else float("nan")
    mean_conn = float(np.mean([r.z for r in ok])) if ok else float("nan")
    over = mean_cost > bo.b_max
    objective = bo.penalty if over else float(np.mean([r.contribution for r in results]))
    return PolicyEvaluation(theta, objective, results, mean_cost, mean_npv, mean_conn, over)
