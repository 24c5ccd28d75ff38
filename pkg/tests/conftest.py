import numpy as np
import pytest
from shapely import union_all
from shapely.geometry import box

from agriscape.landscape import Farm, Kind, Plot, build_configuration

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance verdict; the terminal summary prints them in order."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"ACCEPTANCE {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d}: {detail}")


def square_config(cells, d_neib=1000.0, config_id=0, size=100.0):
    """Grid landscape from ``(farm_id, kind, label, yield, col, row)`` tuples.

    Every plot is a ``size`` x ``size`` square at grid position (col, row).
    """
    plots = []
    for pid, (farm, kind, label, y, col, row) in enumerate(cells):
        geom = box(col * size, row * size, (col + 1) * size, (row + 1) * size)
        k = Kind.AGRICULTURAL if kind == "ag" else Kind.HABITAT
        plots.append(Plot(pid, farm, k, label, geom, y if k is Kind.AGRICULTURAL else 0.0))
    farms = []
    for fid in sorted({p.farm_id for p in plots}):
        members = [p for p in plots if p.farm_id == fid]
        farms.append(Farm(fid, tuple(p.id for p in members), union_all([p.geometry for p in members])))
    return build_configuration(config_id, farms, plots, d_neib)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, n_ag, n_hab=0, config_id=0, d_neib=1000.0, n_farms=1):
    """Small landscape of randomly sized, non-overlapping square plots.

    Plot centres sit on a jittered 300 m lattice so distances vary from touching
    to beyond the neighbourhood radius.
    """
    from agriscape.params import CROPS, HABITATS

    n = n_ag + n_hab
    slots = rng.permutation(9)[:n]
    plots = []
    for pid, slot in enumerate(slots):
        cx, cy = 300.0 * (slot % 3), 300.0 * (slot // 3)
        cx, cy = cx + rng.uniform(-40, 40), cy + rng.uniform(-40, 40)
        half = rng.uniform(40.0, 100.0)
        geom = box(cx - half, cy - half, cx + half, cy + half)
        farm = int(rng.integers(n_farms)) if n_farms > 1 else 0
        if pid < n_ag:
            plots.append(Plot(pid, farm, Kind.AGRICULTURAL, CROPS[int(rng.integers(len(CROPS)))], geom,
                              float(rng.uniform(0.5, 9.0))))
        else:
            plots.append(Plot(pid, farm, Kind.HABITAT, HABITATS[int(rng.integers(len(HABITATS)))], geom, 0.0))
    farms = []
    for fid in sorted({p.farm_id for p in plots}):
        members = [p for p in plots if p.farm_id == fid]
        farms.append(Farm(fid, tuple(p.id for p in members), union_all([p.geometry for p in members])))
    return build_configuration(config_id, farms, plots, d_neib)


def quadratic_grid_oracle(config, params, economics=None, points=101):
    """Best objective over a ``points``-per-variable grid of (m, h) for each plot.

    The objective is a quadratic polynomial in the decisions, so it is recovered
    exactly from the direct year-by-year evaluation on the 3^(2n) lattice
    {0, 1/2, 1}; that polynomial is then scanned on the fine grid. Returns
    (best grid value, max fit residual).
    """
    import itertools

    from agriscape.ei import EIDecision, ei_objective

    ids = tuple(config.agricultural_ids)
    n = len(ids)
    dim = 2 * n
    if dim > 4:
        raise ValueError("grid oracle is limited to two agricultural plots")
    pairs = [(k, l) for k in range(dim) for l in range(k, dim)]

    def features(x):
        return [1.0] + list(x) + [x[k] * x[l] for k, l in pairs]

    lattice = list(itertools.product([0.0, 0.5, 1.0], repeat=dim))
    vals = [ei_objective(config, EIDecision(ids, np.array(x[:n]), np.array(x[n:])), params, economics)
            for x in lattice]
    F = np.array([features(x) for x in lattice])
    coef, *_ = np.linalg.lstsq(F, np.array(vals), rcond=None)
    resid = float(np.max(np.abs(F @ coef - vals)))
    c, g, q = coef[0], coef[1:1 + dim], coef[1 + dim:]
    Q = np.zeros((dim, dim))
    for (k, l), v in zip(pairs, q):
        Q[k, l] = v
    t = np.linspace(0.0, 1.0, points)
    mesh = np.meshgrid(*([t] * (dim - 1)), indexing="ij") if dim > 1 else []
    best = -np.inf
    for a in t:
        # fix the first variable, evaluate the rest on the mesh
        f = c + g[0] * a + Q[0, 0] * a * a
        for k in range(1, dim):
            f = f + (g[k] + Q[0, k] * a) * mesh[k - 1]
            for l in range(k, dim):
                f = f + Q[k, l] * mesh[k - 1] * mesh[l - 1]
        best = max(best, float(np.max(f)))
    return best, resid


def small_ec_instances(max_free=15, rhos=(0.0, 0.02, 0.05, 0.2), start=0):
    """Endless stream of (generator seed, problem, EI solution) with 1..max_free free pieces.

    Landscapes have one or two farms of two or three plots; rho_max cycles through ``rhos``.
    """
    from agriscape.ec import ECConfig, build_problem, with_rho
    from agriscape.ei import solve_ei
    from agriscape.landscape import GeneratorConfig, generate_configuration
    from agriscape.params import EIParams

    gen = GeneratorConfig(n_configs=1, farms_per_config=(1, 2), plots_per_farm=(2, 3), extent=(1500.0, 1500.0))
    params = EIParams()
    seed, k = start, 0
    while True:
        conf = generate_configuration(gen, 1000 + seed, seed)
        seed += 1
        if not conf.agricultural_ids:
            continue
        ec = ECConfig(s_b=2 + seed % 2, s_c=2, seed=seed)
        sol = solve_ei(conf, params)
        problem = build_problem(conf, params, ec, sol)
        if not 0 < len(problem.free) <= max_free:
            continue
        yield seed - 1, with_rho(problem, rhos[k % len(rhos)]), sol
        k += 1
