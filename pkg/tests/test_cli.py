import csv
import json
from pathlib import Path

import numpy as np
import pytest

from adaptive_kb import model1
from adaptive_kb.adaptive import adaptive_filter_i, error_process
from adaptive_kb.cli import (COMPARISON_COLUMNS, ESTIMATE_COLUMNS, FILTER_COLUMNS, PATH_COLUMNS, main,
                             read_paths)
from adaptive_kb.config import ConfigError, RunConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def rows(path):
    lines = Path(path).read_text().splitlines()
    data = [ln for ln in lines if not ln.startswith("#")]
    return tuple(data[0].split(",")), [[float(v) for v in ln.split(",")] for ln in data[1:]], \
        [ln[2:] for ln in lines if ln.startswith("#")]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module", params=["model1", "model2", "model3"])
def pipeline(request, tmp_path_factory):
    out = tmp_path_factory.mktemp(request.param)
    cfg = CONFIGS / f"{request.param}.toml"
    for cmd in ("simulate", "filter", "estimate", "adaptive"):
        assert run(cmd, "--config", cfg, "--out", out) == 0
    return RunConfig.load(cfg), out


def test_paths_file(pipeline):
    cfg, out = pipeline
    header, data, comments = rows(out / "paths.csv")
    assert header == PATH_COLUMNS
    assert len(data) == cfg.time_grid().N + 1
    assert np.isnan(data[-1][3]) and np.isnan(data[-1][4])
    assert comments[0].startswith(f"kind={cfg.model['kind']}, seed=12345, replicate=0")


def test_exact_headers(pipeline):
    cfg, out = pipeline
    assert rows(out / "filter.csv")[0] == FILTER_COLUMNS
    assert rows(out / "estimates.csv")[0] == ESTIMATE_COLUMNS[cfg.model["kind"]]
    assert rows(out / "comparison.csv")[0] == COMPARISON_COLUMNS
    assert len(rows(out / "filter.csv")[1]) == cfg.time_grid().N + 1


def test_estimates_start_at_tau(pipeline):
    cfg, out = pipeline
    _, data, _ = rows(out / "estimates.csv")
    assert data[0][0] == pytest.approx(cfg.tau)
    assert data[-1][0] == pytest.approx(cfg.time_grid().T)


def test_rerun_byte_identical(pipeline, tmp_path):
    cfg, out = pipeline
    path = CONFIGS / f"{ {'det_init': 'model1', 'joint': 'model2', 'random_init': 'model3'}[cfg.model['kind']]}.toml"
    for cmd in ("simulate", "filter", "estimate", "adaptive"):
        assert run(cmd, "--config", path, "--out", tmp_path) == 0
    for name in ("paths.csv", "filter.csv", "estimates.csv", "comparison.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_adaptive_error_matches_library(tmp_path):
    cfg_path = CONFIGS / "model1.toml"
    assert run("simulate", "--config", cfg_path, "--out", tmp_path, "--seed", 31) == 0
    assert run("adaptive", "--config", cfg_path, "--out", tmp_path) == 0
    cfg = RunConfig.load(cfg_path)
    spec, grid = cfg.spec(), cfg.time_grid()
    X = read_paths(tmp_path / "paths.csv", grid).X[None, :]
    q = model1.quantities(spec, grid)
    ad = adaptive_filter_i(spec, X, grid, model1.mle_recurrent(spec, X, grid, cfg.tau, q), q)
    err = error_process(ad, model1.oracle_filter(spec, X, grid, spec.theta, q), spec.eps)
    _, data, comments = rows(tmp_path / "comparison.csv")
    assert data[-1][3] == float(repr(float(err.terminal[0])))
    assert any(c.startswith("adaptive_start=") for c in comments)


def test_noiseless_estimate_constant(tmp_path):
    doc = RunConfig.load(CONFIGS / "model1.toml").to_dict()
    doc["model"]["eps"] = 0.0
    doc["model"]["theta"] = 0.7
    cfg_path = tmp_path / "noiseless.toml"
    cfg_path.write_text(toml_dump(doc))
    assert run("simulate", "--config", cfg_path, "--out", tmp_path) == 0
    assert run("estimate", "--config", cfg_path, "--out", tmp_path) == 0
    _, data, _ = rows(tmp_path / "estimates.csv")
    est = np.array([r[1] for r in data])
    # exact up to the O(dt) quadrature of the Fisher integral
    assert np.max(np.abs(est - 0.7)) < 10 * cfg_grid_dt(cfg_path)


def cfg_grid_dt(path):
    return RunConfig.load(path).time_grid().dt


def toml_dump(doc):
    def val(v):
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)
    return "".join(f"[{s}]\n" + "".join(f"{k} = {val(v)}\n" for k, v in t.items()) + "\n" for s, t in doc.items())


def test_sigma_crossing_rejected(tmp_path, capsys):
    assert run("simulate", "--config", CONFIGS / "sigma_crossing.toml", "--out", tmp_path) == 2
    assert "error: σ not separated from 0" in capsys.readouterr().err
    assert not (tmp_path / "paths.csv").exists()


def test_grid_mismatch(tmp_path, capsys):
    assert run("simulate", "--config", CONFIGS / "model1.toml", "--out", tmp_path) == 0
    assert run("filter", "--config", CONFIGS / "model3.toml", "--paths", tmp_path / "paths.csv",
               "--out", tmp_path) == 2
    assert "grid mismatch" in capsys.readouterr().err


def test_bad_paths_header(tmp_path):
    p = tmp_path / "paths.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError, match="header"):
        read_paths(p, RunConfig.load(CONFIGS / "model1.toml").time_grid())


def test_json_and_plots(tmp_path):
    doc = RunConfig.load(CONFIGS / "model1.toml").to_dict()
    doc["output"] = {"directory": str(tmp_path), "formats": ["csv", "json"], "plots": True}
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text(toml_dump(doc))
    assert run("simulate", "--config", cfg_path) == 0
    assert run("filter", "--config", cfg_path) == 0
    js = json.loads((tmp_path / "paths.json").read_text())
    assert js["header"] == list(PATH_COLUMNS)
    assert js["columns"]["dW"][-1] is None
    assert (tmp_path / "filter.svg").read_text().startswith("<svg")


def test_missing_theta_oracle(tmp_path):
    doc = RunConfig.load(CONFIGS / "model1.toml").to_dict()
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text(toml_dump(doc))
    assert run("simulate", "--config", cfg_path, "--out", tmp_path) == 0
    del doc["model"]["theta"]
    cfg_path.write_text(toml_dump(doc))
    assert run("adaptive", "--config", cfg_path, "--out", tmp_path) == 0
    _, data, comments = rows(tmp_path / "comparison.csv")
    assert np.isnan(data[-1][2]) and "status=oracle_unavailable_no_true_parameter" in comments
    assert run("simulate", "--config", cfg_path, "--out", tmp_path) == 2


def test_experiment_pass_fail_and_report(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("experiment", "--config", CONFIGS / "calibration.toml", "--out", a) == 0
    assert run("experiment", "--config", CONFIGS / "calibration.toml", "--out", b, "--workers", 2) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert run("experiment", "--config", CONFIGS / "designed_failure.toml", "--out", tmp_path / "f") == 1
    out = capsys.readouterr().out
    assert "PASS calibration" in out and "FAIL calibration" in out
    assert run("report", "--out", a) == 0
    assert "PASS heavy_tail_detection" in capsys.readouterr().out
    assert run("report", "--report", a / "report.json", "--format", "json") == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True
    assert run("report", "--out", tmp_path / "f", "--format", "csv") == 1
    r = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert r[0] == ["name", "anchor", "passed", "tolerance"] and r[1][2] == "False"


def test_bad_arguments(tmp_path, capsys):
    assert run("report", "--out", tmp_path / "none") == 2
    assert run("simulate", "--config", tmp_path / "missing.toml") == 2
    with pytest.raises(SystemExit):
        run("simulate", "--config", CONFIGS / "model1.toml", "--seed", -1)
    assert run("simulate", "--config", CONFIGS / "model1.toml", "--replicate", -1) == 2
