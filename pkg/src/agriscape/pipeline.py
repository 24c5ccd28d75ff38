"""Stage runners behind the command line: generate, ei, ec, bo and report.

Each stage writes into its own directory under the run root and records a
manifest. Outputs are written atomically; per-configuration work can run in
a process pool, with results gathered in configuration order so artifacts do
not depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import ec as EC
from .bo import (archetype_report, archetypes_csv, archetypes_json, observation_row, OBSERVATION_HEADER,
                 portfolio_csv, portfolio_json, run_policy_bo)
from .config import PipelineConfig
from .ei import EISolution, solve_ei
from .landscape import LandscapeSchemaError, generate_configuration, load_configuration, save_configuration
from .metrics import (betweenness, centrality_csv, classify_connections, designate_hubs, edges_csv, hubs_csv,
                      iic_raw, plot_scores)
from .policy import PolicyCase, Targets


class StageError(RuntimeError):
    """A stage cannot start (missing inputs or protected outputs)."""


class DependencyError(StageError):
    pass


class OutputExistsError(StageError):
    pass


MANIFEST = "manifest.json"


def stage_seed(master: int, stage: str, config_id: int = 0) -> int:
    """Stable 63-bit seed for one stage and configuration."""
    digest = hashlib.sha256(f"{master}:{stage}:{config_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def prepare_output(directory: Path, force: bool) -> Path:
    """Create a stage directory; an existing non-empty one needs ``force`` and must be ours."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise OutputExistsError(f"{directory} already holds results; pass --force to replace them")
        if not (directory / MANIFEST).exists():
            raise OutputExistsError(f"{directory} is not a stage directory written by this tool; refusing to clear it")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class StageReport:
    stage: str
    outputs: list[str]
    failures: list[str]

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def _write_manifest(directory: Path, cfg: PipelineConfig, stage: str, inputs: dict, outputs: list[str],
                    failures: list[str], started: str) -> None:
    run_id = hashlib.sha256(f"{cfg.digest()}:{cfg.seed}".encode()).hexdigest()[:16]
    doc = {"run_id": run_id, "stage": stage, "config_sha256": cfg.digest(), "seed": cfg.seed,
           "stages": ["generate", "ei", "ec", "bo", "report"], "inputs": inputs, "outputs": sorted(outputs),
           "failures": failures, "started": started, "finished": _now()}
    atomic_write(directory / MANIFEST, json.dumps(doc, indent=1, sort_keys=True))


def _pool_map(fn, items, workers: int):
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(v) -> str:
    return repr(float(v))


def config_name(config_id: int) -> str:
    return f"config_{config_id:04}"


# -- generate ------------------------------------------------------------------------------------

def _generate_one(args):
    cfg, k = args
    conf = generate_configuration(cfg.generator, stage_seed(cfg.seed, "generate", k), config_id=k)
    return k, save_configuration(conf)


def run_generate(cfg: PipelineConfig, out: Path, force: bool = False, workers: int = 1) -> StageReport:
    started = _now()
    directory = prepare_output(Path(out) / "landscapes", force)
    outputs = []
    for k, data in _pool_map(_generate_one, [(cfg, k) for k in range(cfg.generator.n_configs)], workers):
        name = f"{config_name(k)}.geojson"
        atomic_write(directory / name, data)
        outputs.append(name)
    _write_manifest(directory, cfg, "generate", {}, outputs, [], started)
    return StageReport("generate", outputs, [])


# -- ei ------------------------------------------------------------------------------------------

EI_PLOT_HEADER = ("plot_id", "crop", "m", "h", "npv")
CROP_SUMMARY_HEADER = ("crop", "n_plots", "mean_m", "mean_h")


def _landscape_files(directory: Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DependencyError(f"landscape directory {directory} does not exist")
    files = sorted(directory.glob("*.geojson"))
    if not files:
        raise DependencyError(f"no .geojson landscapes in {directory}")
    return files


def _load(cfg: PipelineConfig, path: Path):
    return load_configuration(Path(path).read_bytes(), d_neib=cfg.ei.economics.d_neib)


def _ei_one(args):
    cfg, path = args
    try:
        conf = _load(cfg, path)
        solver = replace(cfg.solver, seed=stage_seed(cfg.seed, "ei", conf.config_id))
        sol = solve_ei(conf, cfg.ei, solver)
    except (OSError, LandscapeSchemaError, ValueError) as exc:
        return path.name, None, f"{path.name}: {exc}"
    rows = []
    for pid, m, h in zip(sol.decisions.plot_ids, sol.decisions.m, sol.decisions.h):
        rows.append((pid, conf.plots[pid].label, _f(m), _f(h), _f(sol.plot_npvs[pid])))
    doc = sol.to_dict()
    doc["config_id"] = conf.config_id
    doc["crops"] = {str(pid): conf.plots[pid].label for pid in sol.decisions.plot_ids}
    return path.name, (conf.config_id, _csv_text(EI_PLOT_HEADER, rows), json.dumps(doc, sort_keys=True),
                       [(conf.plots[p].label, float(m), float(h)) for p, m, h in
                        zip(sol.decisions.plot_ids, sol.decisions.m, sol.decisions.h)]), None


def run_ei(cfg: PipelineConfig, out: Path, landscapes: Path | None = None, force: bool = False,
           workers: int = 1) -> StageReport:
    started = _now()
    landscapes = Path(landscapes) if landscapes else Path(out) / "landscapes"
    files = _landscape_files(landscapes)
    directory = prepare_output(Path(out) / "ei", force)
    outputs, failures = [], []
    per_crop: dict[str, list[tuple[float, float]]] = {}
    for _, result, error in _pool_map(_ei_one, [(cfg, f) for f in files], workers):
        if error:
            failures.append(error)
            continue
        cid, table, doc, fractions = result
        for name, data in ((f"{config_name(cid)}.csv", table), (f"{config_name(cid)}.json", doc)):
            atomic_write(directory / name, data)
            outputs.append(name)
        for crop, m, h in fractions:
            per_crop.setdefault(crop, []).append((m, h))
    rows = [(c, len(v), _f(np.mean([a for a, _ in v])), _f(np.mean([b for _, b in v]))) for c, v in sorted(per_crop.items())]
    atomic_write(directory / "crop_fractions.csv", _csv_text(CROP_SUMMARY_HEADER, rows))
    outputs.append("crop_fractions.csv")
    _write_manifest(directory, cfg, "ei", {"landscapes": str(landscapes)}, outputs, failures, started)
    return StageReport("ei", outputs, failures)


# -- ec ------------------------------------------------------------------------------------------

EC_SUMMARY_HEADER = ("config_id", "mode", "Z", "iic_raw", "mean_loss_ratio", "feasible")
EC_PLOT_HEADER = ("plot_id", "farm_id", "crop", "base_yield", "m_eff", "h_eff", "npv_base", "npv_new",
                  "npv_change", "betweenness", "hub")
DISTRIBUTION_HEADER = ("mode", "statistic", "Z", "iic_raw")


def _ei_results(directory: Path) -> dict[int, EISolution]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DependencyError(f"EI results {directory} not found; run the ei stage first")
    out = {}
    for path in sorted(directory.glob("config_*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        out[int(doc["config_id"])] = EISolution.from_dict(doc)
    if not out:
        raise DependencyError(f"no EI results in {directory}; run the ei stage first")
    return out


def _ec_one(args):
    cfg, path, ei_doc, modes = args
    try:
        conf = _load(cfg, path)
        ei_sol = EISolution.from_dict(ei_doc)
        ec_cfg = replace(cfg.ec, seed=stage_seed(cfg.seed, "ec", conf.config_id))
        problem = EC.build_problem(conf, cfg.ei, ec_cfg, ei_sol)
        results = {}
        for mode in modes:
            sol = EC.reposition(problem, ei_sol) if mode == "reposition" else EC.optimize_connectivity(problem, ei_sol)
            results[mode] = _ec_outputs(conf, problem, ei_sol, sol)
        return conf.config_id, results, None
    except (OSError, LandscapeSchemaError, ValueError) as exc:
        return None, None, f"{Path(path).name}: {exc}"


def _ec_outputs(conf, problem, ei_sol: EISolution, sol: EC.ECSolution) -> dict:
    graph = EC.piece_graph(problem, sol)
    scores = betweenness(graph)
    per_plot = plot_scores(graph, scores)
    ag = conf.agricultural_ids
    hubs = designate_hubs(graph, ag, scores) if ag else set()
    farms = problem.constrained_farms
    mean_loss = float(np.mean([sol.loss_ratio(f) for f in farms])) if farms else 0.0
    iic = iic_raw(graph)
    rows = []
    for pid in ag:
        plot = conf.plots[pid]
        fm, fh = sol.fractions[pid]
        base, new = ei_sol.plot_npvs[pid], sol.plot_npvs[pid]
        rows.append((pid, plot.farm_id, plot.label, _f(plot.base_yield), _f(fm), _f(fh), _f(base), _f(new),
                     _f(new - base), _f(per_plot.get(pid, 0.0)), int(pid in hubs)))
    doc = sol.to_dict()
    doc.update(config_id=conf.config_id, iic_raw=iic, mean_loss_ratio=mean_loss)
    name = config_name(conf.config_id)
    files = {
        f"{name}_pieces.geojson": EC.selected_pieces_geojson(problem, sol),
        f"{name}_farms.csv": EC.farm_csv(sol),
        f"{name}_plots.csv": _csv_text(EC_PLOT_HEADER, rows),
        f"{name}_centrality.csv": centrality_csv(graph, scores),
        f"{name}_hubs.csv": hubs_csv(per_plot, hubs, ag),
        f"{name}_edges.csv": edges_csv(classify_connections(graph)),
        f"{name}.json": json.dumps(doc, sort_keys=True),
    }
    summary = (conf.config_id, sol.mode, _f(sol.z), _f(iic), _f(mean_loss), int(sol.feasible))
    return {"files": files, "summary": summary, "z": sol.z, "iic": iic}


def _distribution(mode: str, zs: list[float], iics: list[float]) -> list[tuple]:
    if not zs:
        return []

    def stats(v):
        q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
        sd = statistics.stdev(v) if len(v) > 1 else 0.0
        return {"count": len(v), "mean": float(np.mean(v)), "sd": sd, "min": q[0], "q25": q[1],
                "median": q[2], "q75": q[3], "max": q[4]}

    a, b = stats(zs), stats(iics)
    return [(mode, k, _f(a[k]), _f(b[k])) for k in a]


def run_ec(cfg: PipelineConfig, out: Path, mode: str = "both", landscapes: Path | None = None,
           ei_dir: Path | None = None, force: bool = False, workers: int = 1) -> StageReport:
    started = _now()
    modes = ["reposition", "optimize"] if mode == "both" else [mode]
    if any(m not in ("reposition", "optimize") for m in modes):
        raise ValueError(f"unknown EC mode {mode!r}")
    landscapes = Path(landscapes) if landscapes else Path(out) / "landscapes"
    ei_dir = Path(ei_dir) if ei_dir else Path(out) / "ei"
    ei_sols = _ei_results(ei_dir)
    files = _landscape_files(landscapes)
    dirs = {m: prepare_output(Path(out) / "ec" / m, force) for m in modes}
    jobs, failures = [], []
    for f in files:
        cid = int(json.loads(f.read_text(encoding="utf-8")).get("config_id", -1))
        if cid not in ei_sols:
            failures.append(f"{f.name}: no EI result for config {cid}")
            continue
        ei_doc = json.loads((ei_dir / f"{config_name(cid)}.json").read_text(encoding="utf-8"))
        jobs.append((cfg, f, ei_doc, modes))
    outputs: dict[str, list[str]] = {m: [] for m in modes}
    summaries: dict[str, list[tuple]] = {m: [] for m in modes}
    for cid, results, error in _pool_map(_ec_one, jobs, workers):
        if error:
            failures.append(error)
            continue
        for m, res in results.items():
            for name, data in res["files"].items():
                atomic_write(dirs[m] / name, data)
                outputs[m].append(name)
            summaries[m].append(res)
    for m in modes:
        rows = [r["summary"] for r in summaries[m]]
        atomic_write(dirs[m] / "summary.csv", _csv_text(EC_SUMMARY_HEADER, rows))
        dist = _distribution(m, [r["z"] for r in summaries[m]], [r["iic"] for r in summaries[m]])
        atomic_write(dirs[m] / "distribution.csv", _csv_text(DISTRIBUTION_HEADER, dist))
        outputs[m] += ["summary.csv", "distribution.csv"]
        _write_manifest(dirs[m], cfg, f"ec-{m}", {"landscapes": str(landscapes), "ei": str(ei_dir)},
                        outputs[m], failures, started)
    return StageReport("ec", [f"{m}/{n}" for m in modes for n in outputs[m]], failures)


# -- bo ------------------------------------------------------------------------------------------

TRACE_HEADER = ("iteration", "O_BO", "best_so_far")


def load_targets(ec_dir: Path) -> dict[int, Targets]:
    ec_dir = Path(ec_dir)
    if not ec_dir.is_dir():
        raise DependencyError(f"stage-2 targets {ec_dir} not found; run `ec --mode optimize` first")
    out = {}
    for path in sorted(ec_dir.glob("config_*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        out[int(doc["config_id"])] = Targets(int(doc["config_id"]), float(doc["z"]),
                                             {int(k): float(v) for k, v in doc["farm_npvs"].items()})
    if not out:
        raise DependencyError(f"no stage-2 targets in {ec_dir}; run `ec --mode optimize` first")
    return out


def select_configs(cfg: PipelineConfig, available: list[int]) -> list[int]:
    ids = sorted(available)
    if len(ids) <= cfg.bo.n_samples:
        return ids
    rng = np.random.default_rng(stage_seed(cfg.seed, "bo-sample"))
    return sorted(int(i) for i in rng.choice(ids, size=cfg.bo.n_samples, replace=False))


def run_bo_stage(cfg: PipelineConfig, out: Path, landscapes: Path | None = None, ec_dir: Path | None = None,
                 force: bool = False, workers: int = 1) -> StageReport:
    started = _now()
    landscapes = Path(landscapes) if landscapes else Path(out) / "landscapes"
    ec_dir = Path(ec_dir) if ec_dir else Path(out) / "ec" / "optimize"
    targets = load_targets(ec_dir)
    by_id = {}
    for f in _landscape_files(landscapes):
        conf = _load(cfg, f)
        by_id[conf.config_id] = conf
    chosen = [c for c in select_configs(cfg, [c for c in targets if c in by_id])]
    if not chosen:
        raise DependencyError("no configuration has both a landscape and a stage-2 target")
    cases = [PolicyCase.prepare(by_id[c], cfg.ei, replace(cfg.ec, seed=stage_seed(cfg.seed, "ec", c)), targets[c],
                                replace(cfg.solver, seed=stage_seed(cfg.seed, "ei", c))) for c in chosen]
    bo = replace(cfg.bo, seed=stage_seed(cfg.seed, "bo"), workers=workers)
    directory = prepare_output(Path(out) / "bo", force)
    log_tmp = directory / "observations.csv.partial"
    with open(log_tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBSERVATION_HEADER)

        def log(obs):
            writer.writerow(observation_row(obs))
            fh.flush()

        search = run_policy_bo(cases, bo, log, list(cfg.initial_policies))
    os.replace(log_tmp, directory / "observations.csv")
    failures = [f"iteration {o.iteration}: {o.error}" for o in search.result.observations if o.error]
    top = search.top(bo.top_k)
    report = archetype_report(search.portfolio, cfg.archetype_slack)
    trace_rows = [(o.iteration, _f(o.value), _f(b)) for o, b in zip(search.result.observations, search.trace)]
    files = {
        "portfolio.csv": portfolio_csv(top),
        "portfolio.json": portfolio_json(top),
        "archetypes.csv": archetypes_csv(report),
        "archetypes.json": archetypes_json(report),
        "trace.csv": _csv_text(TRACE_HEADER, trace_rows),
        "configs.json": json.dumps({"config_ids": chosen}),
    }
    for name, data in files.items():
        atomic_write(directory / name, data)
    outputs = ["observations.csv"] + list(files)
    _write_manifest(directory, cfg, "bo", {"landscapes": str(landscapes), "targets": str(ec_dir)},
                    outputs, failures, started)
    # failed evaluations are part of the search record, not a stage failure
    return StageReport("bo", outputs, [])


# -- report --------------------------------------------------------------------------------------

REPORT_TABLES = {
    "crop_fractions.csv": ("run", "config_id", "plot_id", "crop", "m", "h", "npv"),
    "iic_by_stage.csv": ("run", "config_id", "stage", "Z", "iic_raw", "mean_loss_ratio"),
    "npv_vs_yield.csv": ("run", "config_id", "stage", "plot_id", "crop", "base_yield", "npv_base", "npv_new",
                         "npv_change"),
    "hubs.csv": ("run", "config_id", "stage", "plot_id", "hub", "betweenness", "npv_change", "m_eff", "h_eff"),
    "policy_scatter.csv": ("run", "iteration", "O_BO", "mean_conn", "mean_npv", "mean_cost"),
}


def _read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def run_report(cfg: PipelineConfig, out: Path, run_dirs: list[Path], force: bool = False) -> StageReport:
    started = _now()
    tables = {name: [] for name in REPORT_TABLES}
    missing = []
    for run in run_dirs:
        run = Path(run)
        label = run.name
        ei_dir = run / "ei"
        for path in sorted(ei_dir.glob("config_*.csv")) if ei_dir.is_dir() else []:
            cid = int(path.stem.split("_")[1])
            for r in _read_csv(path):
                tables["crop_fractions.csv"].append((label, cid, r["plot_id"], r["crop"], r["m"], r["h"], r["npv"]))
        for stage in ("reposition", "optimize"):
            d = run / "ec" / stage
            if not d.is_dir():
                continue
            if (d / "summary.csv").exists():
                for r in _read_csv(d / "summary.csv"):
                    tables["iic_by_stage.csv"].append((label, r["config_id"], stage, r["Z"], r["iic_raw"],
                                                       r["mean_loss_ratio"]))
            for path in sorted(d.glob("config_*_plots.csv")):
                cid = int(path.stem.split("_")[1])
                for r in _read_csv(path):
                    tables["npv_vs_yield.csv"].append((label, cid, stage, r["plot_id"], r["crop"], r["base_yield"],
                                                       r["npv_base"], r["npv_new"], r["npv_change"]))
                    tables["hubs.csv"].append((label, cid, stage, r["plot_id"], r["hub"], r["betweenness"],
                                               r["npv_change"], r["m_eff"], r["h_eff"]))
        obs = run / "bo" / "observations.csv"
        if obs.exists():
            for r in _read_csv(obs):
                tables["policy_scatter.csv"].append((label, r["iteration"], r["O_BO"], r["mean_conn"],
                                                     r["mean_npv"], r["mean_cost"]))
        if not run.is_dir():
            missing.append(f"{run}: run directory does not exist")
    directory = prepare_output(Path(out) / "report", force)
    for name, header in REPORT_TABLES.items():
        atomic_write(directory / name, _csv_text(header, tables[name]))
    _write_manifest(directory, cfg, "report", {"runs": [str(r) for r in run_dirs]}, list(REPORT_TABLES),
                    missing, started)
    return StageReport("report", list(REPORT_TABLES), missing)
