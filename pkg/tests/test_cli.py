import csv
import json
import subprocess
import sys

import pytest

from agriscape.cli import main

SMALL = {"generator": {"farms_per_config": [2, 3], "plots_per_farm": [2, 3], "extent": [1500, 1500]}}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(SMALL))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    cfg = base / "config.json"
    cfg.write_text(json.dumps(SMALL))
    out = base / "run"
    assert run("generate", "--config", cfg, "--out", out, "--n-configs", 3) == 0
    assert run("ei", "--config", cfg, "--out", out) == 0
    assert run("ec", "--config", cfg, "--out", out) == 0
    assert run("bo", "--config", cfg, "--out", out, "--n-calls", 5, "--n-init", 3) == 0
    assert run("report", "--config", cfg, "--out", out) == 0
    return cfg, out


class TestGenerate:
    def test_files_and_manifest(self, cfg_path, tmp_path):
        out = tmp_path / "run"
        assert run("generate", "--config", cfg_path, "--out", out, "--n-configs", 3) == 0
        files = sorted(p.name for p in (out / "landscapes").glob("*.geojson"))
        assert files == ["config_0000.geojson", "config_0001.geojson", "config_0002.geojson"]
        manifest = json.loads((out / "landscapes" / "manifest.json").read_text())
        assert manifest["outputs"] == files and manifest["failures"] == []

    def test_deterministic(self, cfg_path, tmp_path):
        for name in ("a", "b"):
            assert run("generate", "--config", cfg_path, "--out", tmp_path / name, "--n-configs", 2, "--seed", 4) == 0
        for f in (tmp_path / "a" / "landscapes").glob("*.geojson"):
            assert f.read_bytes() == (tmp_path / "b" / "landscapes" / f.name).read_bytes()

    def test_refuses_overwrite(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        assert run("generate", "--config", cfg_path, "--out", out, "--n-configs", 1) == 0
        assert run("generate", "--config", cfg_path, "--out", out, "--n-configs", 1) == 2
        assert "--force" in capsys.readouterr().err
        assert run("generate", "--config", cfg_path, "--out", out, "--n-configs", 1, "--force") == 0


class TestErrors:
    def test_invalid_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"generator": {"p_agricultural": 0.9}}))
        assert run("generate", "--config", bad, "--out", tmp_path / "o") == 2
        assert "invalid configuration" in capsys.readouterr().err

    def test_unknown_section(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"gen": {}}))
        assert run("generate", "--config", bad, "--out", tmp_path / "o") == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_ei_inputs(self, tmp_path, capsys):
        (tmp_path / "run" / "ei").mkdir(parents=True)
        assert run("ec", "--out", tmp_path / "run") == 1
        assert capsys.readouterr().err

    def test_missing_targets(self, tmp_path):
        assert run("bo", "--out", tmp_path / "nothing") == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "agriscape.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "generate" in proc.stdout


class TestPipeline:
    def test_optimize_at_least_reposition(self, pipeline):
        _, out = pipeline
        opt = {r["config_id"]: float(r["Z"]) for r in rows(out / "ec" / "optimize" / "summary.csv")}
        rep = {r["config_id"]: float(r["Z"]) for r in rows(out / "ec" / "reposition" / "summary.csv")}
        assert opt.keys() == rep.keys() and opt
        assert all(opt[k] >= rep[k] for k in opt)

    def test_bo_trace_and_identity_row(self, pipeline):
        _, out = pipeline
        trace = [float(r["best_so_far"]) for r in rows(out / "bo" / "trace.csv")]
        assert len(trace) == 5
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        first = rows(out / "bo" / "observations.csv")[0]
        assert all(float(first[k]) == 0.0 for k in ("s_est_m", "s_est_h", "s_maint_m", "s_maint_h", "p_ha",
                                                     "m_area", "m_frac"))
        assert all(float(v) == 1.0 for k, v in first.items() if k.startswith("e["))
        archetypes = json.loads((out / "bo" / "archetypes.json").read_text())
        assert set(archetypes) == {"closest_connectivity", "min_cost", "max_npv", "min_combined_deviation"}

    def test_bo_rerun_deterministic(self, pipeline):
        cfg, out = pipeline
        assert run("bo", "--config", cfg, "--out", out, "--n-calls", 5, "--n-init", 3, "--force") == 0
        first = (out / "bo" / "observations.csv").read_bytes()
        assert run("bo", "--config", cfg, "--out", out, "--n-calls", 5, "--n-init", 3, "--force") == 0
        assert (out / "bo" / "observations.csv").read_bytes() == first

    def test_report_tables(self, pipeline):
        _, out = pipeline
        report = out / "report"
        for name in ("crop_fractions.csv", "iic_by_stage.csv", "npv_vs_yield.csv", "hubs.csv", "policy_scatter.csv"):
            table = rows(report / name)
            assert table, name
        stages = {r["stage"] for r in rows(report / "iic_by_stage.csv")}
        assert {"reposition", "optimize"} <= stages

    def test_report_idempotent(self, pipeline):
        cfg, out = pipeline
        before = {p.name: p.read_bytes() for p in (out / "report").glob("*.csv")}
        assert run("report", "--config", cfg, "--out", out, "--force") == 0
        after = {p.name: p.read_bytes() for p in (out / "report").glob("*.csv")}
        assert before == after


def test_report_empty_input(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("report", "--out", tmp_path / "out", empty) == 0
    for p in (tmp_path / "out" / "report").glob("*.csv"):
        lines = p.read_text().splitlines()
        assert len(lines) == 1 and "," in lines[0]


def test_workers_flag_validated(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--out", str(tmp_path), "--workers", "0"])
    assert exc.value.code == 2
