"""Gaussian-process Bayesian optimisation for minimising expensive objectives.

The surrogate is a zero-mean GP with a squared-exponential ARD kernel over
the unit cube. Outputs are standardised after clipping penalty values;
length-scales and signal variance maximise the log marginal likelihood via
a batched compass search in log space. New points maximise expected
improvement (random candidates, then L-BFGS-B on the most promising).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import qmc

from .policy import (PARAMETER_NAMES, BOConfig, PolicyCase, PolicyEvaluation, PolicyParams,
                     evaluate_policy, policy_bounds)


class GPFitError(RuntimeError):
    pass


JITTER_START = 1e-8
JITTER_MAX = 1e-4
LOG_BOUNDS = (math.log(1e-2), math.log(1e2))
_LOG_2PI = math.log(2.0 * math.pi)


def latin_hypercube(n: int, dims: int, bounds=None, seed: int = 0) -> np.ndarray:
    """n points with exactly one sample per equal-probability stratum in every dimension."""
    if n < 1 or dims < 1:
        raise ValueError("n and dims must be >= 1")
    u = qmc.LatinHypercube(d=dims, seed=np.random.default_rng(seed)).random(n)
    if bounds is None:
        return u
    b = np.asarray(bounds, dtype=float)
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


# -- Gaussian process ---------------------------------------------------------------------------

def _correlation(X: np.ndarray, log_ls: np.ndarray) -> np.ndarray:
    """Stacked SE correlation matrices for rows of log length-scales (b, d) -> (b, n, n)."""
    Z = X[None, :, :] * np.exp(-log_ls)[:, None, :]
    sq = (Z * Z).sum(-1)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * (Z @ np.swapaxes(Z, 1, 2))
    return np.exp(-0.5 * np.maximum(d2, 0.0))


def _profiled_lml(L: np.ndarray, y: np.ndarray):
    """LML with the signal variance at its closed-form optimum y'R^-1 y / n."""
    n = y.shape[0]
    a = solve_triangular(L, y, lower=True, check_finite=False)
    sf2 = max(float(a @ a) / n, 1e-300)
    logdet = 2.0 * float(np.log(np.diagonal(L)).sum())
    return -0.5 * n * (math.log(sf2) + 1.0 + _LOG_2PI) - 0.5 * logdet, sf2


def _batched_lml(X, y, log_ls, jitter):
    """Profiled log marginal likelihood per row of log length-scales; -inf where singular.

    The Cholesky factor of [[R, y], [y', c]] carries L^-1 y in its last row,
    which gives every quadratic form from one batched factorisation.
    """
    n = X.shape[0]
    b = log_ls.shape[0]
    M = np.empty((b, n + 1, n + 1))
    M[:, :n, :n] = _correlation(X, log_ls) + jitter * np.eye(n)
    M[:, :n, n] = y
    M[:, n, :n] = y
    M[:, n, n] = 2.0 * float(y @ y) / jitter + 1.0
    out = np.full(b, -np.inf)
    try:
        Ls = np.linalg.cholesky(M)
        items = range(b)
    except np.linalg.LinAlgError:
        Ls = np.zeros_like(M)
        items = []
        for k in range(b):
            try:
                Ls[k] = np.linalg.cholesky(M[k])
                items.append(k)
            except np.linalg.LinAlgError:
                pass
        items = np.array(items, dtype=int)
        if items.size == 0:
            return out
    Ls = Ls[items]
    a = Ls[:, n, :n]
    sf2 = np.maximum((a * a).sum(axis=1) / n, 1e-300)
    logdet = 2.0 * np.log(np.diagonal(Ls[:, :n, :n], axis1=1, axis2=2)).sum(axis=1)
    out[items] = -0.5 * n * (np.log(sf2) + 1.0 + _LOG_2PI) - 0.5 * logdet
    return out


@dataclass(frozen=True)
class GPModel:
    X: np.ndarray  # unit-cube inputs (n, d)
    y: np.ndarray  # standardised targets
    y_mean: float
    y_std: float
    log_ls: np.ndarray
    log_sf2: float
    jitter: float
    L: np.ndarray  # Cholesky of the correlation matrix plus jitter
    alpha: np.ndarray  # (R + jitter I)^-1 y
    lml: float

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_ls)

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_sf2)

    @property
    def hyperparameters(self) -> np.ndarray:
        return self.log_ls.copy()


def _standardize(values: np.ndarray, penalty: float, clip_factor: float):
    v = np.asarray(values, dtype=float)
    normal = v[v < penalty]
    if normal.size:
        worst = float(normal.max())
        cap = worst + (clip_factor - 1.0) * (abs(worst) if worst != 0 else 1.0)
        v = np.minimum(v, cap)
    mean = float(v.mean())
    std = float(v.std())
    if not std > 0:
        std = 1.0
    return (v - mean) / std, mean, std


def _compass_search(X, y, start, jitter, step=1.0, min_step=0.05, max_batches=60):
    """Coordinate (compass) search; each batch also tries the sum of all improving moves."""
    x = np.clip(start, *LOG_BOUNDS)
    f = _batched_lml(X, y, x[None, :], jitter)[0]
    dim = len(x)
    moves = np.vstack([np.eye(dim), -np.eye(dim)])
    for _ in range(max_batches):
        if step < min_step:
            break
        trials = np.clip(x[None, :] + step * moves, *LOG_BOUNDS)
        vals = _batched_lml(X, y, trials, jitter)
        up, down = vals[:dim], vals[dim:]
        best_dir = np.where(up >= down, 1.0, -1.0)
        gain = np.maximum(up, down) - f
        if not np.any(gain > 1e-4):
            step *= 0.5
            continue
        k = int(np.argmax(vals))
        cand_x, cand_f = trials[k], vals[k]
        if np.count_nonzero(gain > 1e-4) > 1:
            combo = np.clip(x + step * np.where(gain > 1e-4, best_dir, 0.0), *LOG_BOUNDS)
            fc = _batched_lml(X, y, combo[None, :], jitter)[0]
            if fc > cand_f:
                cand_x, cand_f = combo, fc
        x, f = cand_x, cand_f
    return x, f


def gp_fit(X, values, penalty: float = 1e15, clip_factor: float = 10.0,
           warm_start: np.ndarray | None = None, n_restarts: int = 2, seed: int = 0) -> GPModel:
    """Fit the surrogate to raw objective values (minimisation scale).

    ``warm_start`` holds log length-scales from a previous fit; it is refined
    with a short search before the default and random starts are tried.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("gp_fit needs at least 2 observations")
    if np.any(X < -1e-12) or np.any(X > 1 + 1e-12):
        raise ValueError("inputs must be normalised to the unit cube")
    y, mean, std = _standardize(values, penalty, clip_factor)
    n, d = X.shape
    rng = np.random.default_rng(seed)
    starts = []  # (start, initial step, batch budget)
    if warm_start is not None:
        starts.append((np.asarray(warm_start, dtype=float)[:d], 0.5, 15))
    else:
        starts.append((np.full(d, math.log(0.5)), 1.0, 60))
    for _ in range(n_restarts):
        starts.append((rng.uniform(math.log(0.05), math.log(5.0), d), 1.0, 30))
    jitter = JITTER_START
    while True:
        best_x, best_f = None, -np.inf
        for s, step, budget in starts:
            x, f = _compass_search(X, y, s, jitter, step=step, max_batches=budget)
            if f > best_f:
                best_x, best_f = x, f
        if best_x is not None and np.isfinite(best_f):
            break
        jitter *= 10.0
        if jitter > JITTER_MAX * (1 + 1e-9):
            raise GPFitError("kernel matrix is singular even with the largest jitter")
    log_ls = best_x
    while True:
        R = _correlation(X, log_ls[None, :])[0] + jitter * np.eye(n)
        try:
            L = np.linalg.cholesky(R)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise GPFitError("kernel matrix is singular even with the largest jitter") from None
    lml, sf2 = _profiled_lml(L, y)
    alpha = _cho_solve(L, y)
    return GPModel(X, y, mean, std, log_ls, math.log(sf2), jitter, L, alpha, lml)


def _cho_solve(L, b):
    z = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L.T, z, lower=False, check_finite=False)


def _cross(model: GPModel, Xq: np.ndarray) -> np.ndarray:
    inv = np.exp(-2.0 * model.log_ls)
    diff = Xq[:, None, :] - model.X[None, :, :]
    return np.exp(-0.5 * np.einsum("qnd,d->qn", diff * diff, inv))


def gp_posterior(model: GPModel, Xq, standardized: bool = True):
    """Posterior mean and variance at query points (standardised scale by default)."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    k = _cross(model, Xq)
    sf2 = model.signal_variance
    mean = k @ model.alpha
    v = solve_triangular(model.L, k.T, lower=True, check_finite=False)
    var = sf2 * np.maximum(1.0 - (v * v).sum(axis=0), 0.0)
    if not standardized:
        return mean * model.y_std + model.y_mean, var * model.y_std ** 2
    return mean, var


def expected_improvement(model: GPModel | None, Xq=None, best: float = 0.0, mean=None, var=None):
    """E[max(best - f, 0)] for minimisation; pass (mean, var) directly to skip the model."""
    if mean is None:
        mean, var = gp_posterior(model, Xq)
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    gap = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, gap / np.where(sd > 0, sd, 1.0), 0.0)
    ei = np.where(sd > 0, gap * ndtr(z) + sd * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi),
                  np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement_grad(model: GPModel, x: np.ndarray, best: float):
    """EI and its gradient at a single point."""
    x = np.asarray(x, dtype=float)
    inv = np.exp(-2.0 * model.log_ls)
    k = _cross(model, x[None, :])[0]
    dk = -(x[None, :] - model.X) * inv[None, :] * k[:, None]  # (n, d)
    mean = float(k @ model.alpha)
    dmean = dk.T @ model.alpha
    w = _cho_solve(model.L, k)
    sf2 = model.signal_variance
    var = sf2 * max(1.0 - float(k @ w), 0.0)
    if var <= 1e-300:
        return max(best - mean, 0.0), np.zeros_like(x)
    sd = math.sqrt(var)
    dsd = -sf2 * (dk.T @ w) / sd
    z = (best - mean) / sd
    cdf = float(ndtr(z))
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei = (best - mean) * cdf + sd * pdf
    return ei, -cdf * dmean + pdf * dsd


def propose(model: GPModel, rng: np.random.Generator, n_candidates: int = 1000, n_refine: int = 5) -> np.ndarray:
    d = model.X.shape[1]
    best = float(model.y.min())
    cand = rng.uniform(0.0, 1.0, (n_candidates, d))
    ei = expected_improvement(model, cand, best)
    order = np.argsort(-ei, kind="stable")[:n_refine]
    x_best, ei_best = cand[order[0]], float(ei[order[0]])

    def neg(x):
        v, g = expected_improvement_grad(model, x, best)
        return -v, -g

    for k in order:
        res = minimize(neg, cand[k], jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * d,
                       options={"maxiter": 25})
        if res.success or res.status == 1:
            v = -float(res.fun)
            if v > ei_best:
                x_best, ei_best = np.clip(res.x, 0.0, 1.0), v
    return x_best


# -- optimisation loop ------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    iteration: int
    x_unit: np.ndarray
    point: np.ndarray
    value: float
    info: Any = None
    error: str | None = None


@dataclass(frozen=True)
class BOResult:
    observations: tuple[Observation, ...]
    trace: np.ndarray  # best-so-far after each evaluation

    @property
    def best(self) -> Observation:
        return min(self.observations, key=lambda o: (o.value, o.iteration))

    def ranked(self) -> list[Observation]:
        return sorted(self.observations, key=lambda o: (o.value, o.iteration))


def _to_bounds(u, bounds):
    return bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])


def run_bo(objective: Callable[[np.ndarray], Any], bounds, bo: BOConfig,
           callback: Callable[[Observation], None] | None = None,
           value_of: Callable[[Any], float] = float, initial_points=None) -> BOResult:
    """Minimise ``objective`` over a box; failures are recorded at the penalty value.

    ``initial_points`` (box coordinates) are evaluated first and count towards
    the ``n_init`` design; Latin hypercube points fill the rest.
    """
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[0]
    ss = np.random.SeedSequence(bo.seed)
    lhs_seed, acq_seed, fit_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    rng = np.random.default_rng(acq_seed)
    observations: list[Observation] = []
    values: list[float] = []

    def observe(u):
        point = _to_bounds(u, bounds)
        try:
            info = objective(point)
            value, error = float(value_of(info)), None
        except Exception as exc:  # a failed evaluation must not stop the search
            info, value, error = None, bo.penalty, f"{type(exc).__name__}: {exc}"
        if not math.isfinite(value):
            value = bo.penalty
        obs = Observation(len(observations), u.copy(), point, value, info, error)
        observations.append(obs)
        values.append(value)
        if callback is not None:
            callback(obs)

    width = bounds[:, 1] - bounds[:, 0]
    init = [np.clip((np.asarray(p, dtype=float) - bounds[:, 0]) / np.where(width > 0, width, 1.0), 0.0, 1.0)
            for p in (initial_points if initial_points is not None else [])]
    for u in init[: bo.n_calls]:
        observe(u)
    if len(init) < bo.n_init:
        for u in latin_hypercube(bo.n_init - len(init), d, seed=lhs_seed):
            observe(u)
    start = len(observations)
    warm = None
    for it in range(start, bo.n_calls):
        if len(observations) < 2:  # too little data for a surrogate
            observe(rng.uniform(0.0, 1.0, d))
            continue
        X = np.array([o.x_unit for o in observations])
        try:
            model = gp_fit(X, values, bo.penalty, bo.clip_factor, warm_start=warm,
                           n_restarts=2 if (it - start) % 20 == 0 else 0, seed=fit_seed + it)
        except GPFitError:
            observe(rng.uniform(0.0, 1.0, d))
            continue
        warm = model.hyperparameters
        observe(propose(model, rng, bo.n_candidates, bo.n_refine))
    return BOResult(tuple(observations), np.minimum.accumulate(np.array(values)))


def random_search(objective: Callable[[np.ndarray], float], bounds, n_calls: int, seed: int = 0) -> np.ndarray:
    """Best-so-far trace of uniform random sampling (baseline for BO)."""
    bounds = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng(seed)
    vals = [float(objective(_to_bounds(rng.uniform(0.0, 1.0, bounds.shape[0]), bounds))) for _ in range(n_calls)]
    return np.minimum.accumulate(np.array(vals))


# -- policy search ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PortfolioEntry:
    rank: int
    iteration: int
    theta: PolicyParams
    objective: float
    mean_connectivity: float
    mean_npv: float
    mean_cost: float
    deviation_c: float
    deviation_npv: float
    penalized: bool


def _entry(rank: int, obs: Observation) -> PortfolioEntry:
    ev: PolicyEvaluation | None = obs.info
    theta = PolicyParams.from_vector(np.clip(obs.point, policy_bounds()[:, 0], policy_bounds()[:, 1]))
    if ev is None:
        nan = float("nan")
        return PortfolioEntry(rank, obs.iteration, theta, obs.value, nan, nan, nan, nan, nan, True)
    ok = [c for c in ev.configs if c.error is None]
    dev_c = float(np.mean([c.deviation_c for c in ok])) if ok else float("nan")
    dev_n = float(np.mean([c.deviation_npv for c in ok])) if ok else float("nan")
    return PortfolioEntry(rank, obs.iteration, theta, obs.value, ev.mean_connectivity, ev.mean_npv,
                          ev.mean_cost, dev_c, dev_n, ev.penalized)


@dataclass(frozen=True)
class PolicySearchResult:
    result: BOResult
    portfolio: tuple[PortfolioEntry, ...]  # every observation, ranked by objective

    @property
    def trace(self) -> np.ndarray:
        return self.result.trace

    def top(self, k: int) -> tuple[PortfolioEntry, ...]:
        return self.portfolio[:k]


def run_policy_bo(cases: list[PolicyCase], bo: BOConfig,
                  callback: Callable[[Observation], None] | None = None,
                  initial_policies: list[PolicyParams] | None = None) -> PolicySearchResult:
    bounds = policy_bounds()

    def objective(point):
        theta = PolicyParams.from_vector(np.clip(point, bounds[:, 0], bounds[:, 1]))
        return evaluate_policy(theta, cases, bo)

    init = [t.to_vector() for t in initial_policies or []]
    res = run_bo(objective, bounds, bo, callback, value_of=lambda ev: ev.objective, initial_points=init)
    ranked = res.ranked()
    return PolicySearchResult(res, tuple(_entry(r + 1, o) for r, o in enumerate(ranked)))


ARCHETYPES = ("closest_connectivity", "min_cost", "max_npv", "min_combined_deviation")


def archetype_report(portfolio, connectivity_slack: float = 100.0) -> dict[str, PortfolioEntry]:
    """Named policies from a portfolio.

    Qualifying policies are unpenalised ones whose mean connectivity deviation is
    within ``connectivity_slack`` of the best; min-cost and max-NPV pick among those.
    """
    entries = list(portfolio)
    if not entries:
        raise ValueError("portfolio is empty")
    pool = [e for e in entries if not e.penalized and math.isfinite(e.deviation_c)] or entries

    def dev_c(e):
        return e.deviation_c if math.isfinite(e.deviation_c) else math.inf

    closest = min(pool, key=lambda e: (dev_c(e), e.rank))
    threshold = dev_c(closest) + connectivity_slack
    qualifying = [e for e in pool if dev_c(e) <= threshold]

    def nan_last(v, sign=1.0):
        return sign * v if math.isfinite(v) else math.inf

    return {
        "closest_connectivity": closest,
        "min_cost": min(qualifying, key=lambda e: (nan_last(e.mean_cost), e.rank)),
        "max_npv": min(qualifying, key=lambda e: (nan_last(e.mean_npv, -1.0), e.rank)),
        "min_combined_deviation": min(pool, key=lambda e: (nan_last(dev_c(e) + e.deviation_npv), e.rank)),
    }


# -- outputs -----------------------------------------------------------------------------------

OBSERVATION_HEADER = ("iteration",) + PARAMETER_NAMES + ("O_BO", "mean_conn", "mean_npv", "mean_cost")
PORTFOLIO_HEADER = ("rank", "iteration") + PARAMETER_NAMES + (
    "O_BO", "mean_conn", "mean_npv", "mean_cost", "deviation_c", "deviation_npv", "penalized")


def observation_row(obs: Observation) -> list[str]:
    ev = obs.info
    if isinstance(ev, PolicyEvaluation):
        metrics = (ev.mean_connectivity, ev.mean_npv, ev.mean_cost)
    else:  # failed evaluation, or a plain objective without policy metrics
        metrics = (float("nan"),) * 3
    return [str(obs.iteration)] + [repr(float(v)) for v in obs.point] + [repr(obs.value)] + [repr(float(v)) for v in metrics]


def observations_csv(observations) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBSERVATION_HEADER)
    for obs in observations:
        w.writerow(observation_row(obs))
    return buf.getvalue()


def _entry_dict(e: PortfolioEntry) -> dict:
    return {"rank": e.rank, "iteration": e.iteration, "theta": e.theta.to_dict(), "O_BO": e.objective,
            "mean_conn": e.mean_connectivity, "mean_npv": e.mean_npv, "mean_cost": e.mean_cost,
            "deviation_c": e.deviation_c, "deviation_npv": e.deviation_npv, "penalized": e.penalized}


def portfolio_csv(entries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PORTFOLIO_HEADER)
    for e in entries:
        w.writerow([e.rank, e.iteration] + [repr(v) for v in e.theta.to_vector().tolist()]
                   + [repr(v) for v in (e.objective, e.mean_connectivity, e.mean_npv, e.mean_cost,
                                        e.deviation_c, e.deviation_npv)] + [int(e.penalized)])
    return buf.getvalue()


def portfolio_json(entries) -> str:
    return json.dumps([_entry_dict(e) for e in entries], indent=1, sort_keys=True)


def archetypes_json(report: dict[str, PortfolioEntry]) -> str:
    return json.dumps({name: _entry_dict(e) for name, e in report.items()}, indent=1, sort_keys=True)


def archetypes_csv(report: dict[str, PortfolioEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("archetype",) + PORTFOLIO_HEADER)
    for name, e in report.items():
        w.writerow([name, e.rank, e.iteration] + [repr(v) for v in e.theta.to_vector().tolist()]
                   + [repr(v) for v in (e.objective, e.mean_connectivity, e.mean_npv, e.mean_cost,
                                        e.deviation_c, e.deviation_npv)] + [int(e.penalized)])
    return buf.getvalue()
