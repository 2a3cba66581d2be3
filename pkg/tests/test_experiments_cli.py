import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from summitirl import cli
from summitirl import experiments as ex
from summitirl.types import ObservationSet

SMALL_GRID = {
    "experiment": "grid-inference",
    "environment": {"w": 5, "n_features": 1},
    "theta_true": [-0.5],
    "data": {"n_observations": 30, "n_test": 30},
    "bo": {"n_opt": 10, "batch_size": 5, "n_mc": 100},
    "mcmc": {"n_samples": 600, "burn_in": 100, "thinning": 5},
    "prediction": {"n_sim": 50},
    "qlearning": {"episodes": 2000},
}

SMALL_MENU = {
    "experiment": "menu",
    "data": {"n_observations": 100, "n_test": 0},
    "bo": {"n_opt": 6, "batch_size": 3, "n_mc": 100},
    "mcmc": {"n_samples": 400, "burn_in": 100, "thinning": 5},
    "qlearning": {"episodes": 20_000},
}


def _write_config(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def _run(*argv):
    return cli.main([str(a) for a in argv])


# -- configuration ----------------------------------------------------------------------------

@pytest.mark.parametrize("over", [{"data": {"n_observations": 0}}, {"bo": {"n_mc": 0}}, {"method": "nope"},
                                  {"experiment": "nope"}, {"environment": {"n_features": 0}}])
def test_invalid_configs_are_rejected(over):
    with pytest.raises(ex.ConfigError):
        ex.resolve_config({**SMALL_GRID, **over})


def test_exact_method_unavailable_for_menu(tmp_path, capsys):
    with pytest.raises(ex.ConfigError):
        ex.resolve_config({"experiment": "menu"}, method="exact")
    path = _write_config(tmp_path, SMALL_MENU)
    assert _run("generate-data", "--config", path, "--out", tmp_path / "m", "--method", "exact") == 2
    assert "exact" in capsys.readouterr().err


def test_defaults_and_overrides():
    cfg = ex.resolve_config({}, seed=4, method="abc")
    assert cfg["seed"] == 4 and cfg["method"] == "abc"
    assert cfg["environment"]["w"] == 9 and cfg["theta_true"] == [-0.33, -0.67]
    assert cfg["bounds"] == {"lower": [-1.0, -1.0], "upper": [0.0, 0.0]}
    menu = ex.resolve_config({"experiment": "menu"}, paper_scale=True)
    assert menu["bo"]["n_opt"] == 1000 and menu["qlearning"]["episodes"] == 5_000_000
    assert ex.resolve_config({"experiment": "menu"})["bo"]["n_opt"] == 300


def test_runtime_config_validation(tmp_path):
    with pytest.raises(ex.ConfigError):
        ex.resolve_config({"experiment": "runtime", "n_mc": 0})
    with pytest.raises(ex.ConfigError):
        ex.resolve_config({"experiment": "runtime", "methods": ["exact", "bogus"]})


def test_jobs_fall_back_to_environment(monkeypatch):
    monkeypatch.delenv("SUMMITIRL_JOBS", raising=False)
    assert cli._jobs(None) == 1
    monkeypatch.setenv("SUMMITIRL_JOBS", "3")
    assert cli._jobs(None) == 3
    assert cli._jobs(2) == 2


# -- data and filtering -------------------------------------------------------------------------

def test_step_filter_arithmetic():
    obs = ObservationSet.grid([((0, 0), 4), ((0, 0), 13), ((0, 2), 12), ((2, 0), 20)])
    kept, frac = ex.filter_max_steps(obs, 12)
    assert frac == 0.5 and [s.steps for s in kept.summaries] == [4, 12]
    assert ex.filter_max_steps(obs, None) == (obs, 1.0)
    assert ex.filter_max_steps(obs, 1)[0] is None


def test_generate_data_is_seeded():
    cfg = ex.resolve_config(SMALL_GRID, seed=3)
    a, b = ex.generate_data(cfg), ex.generate_data(cfg)
    assert a["observations"] == b["observations"] and a["test"] == b["test"]
    c = ex.generate_data(ex.resolve_config(SMALL_GRID, seed=4))
    assert c["observations"] != a["observations"]
    assert len(a["observations"]) == 30 and a["kept_fraction"] == 1.0


# -- end to end through the command line ---------------------------------------------------------------

@pytest.fixture(scope="module")
def grid_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    path = _write_config(root, SMALL_GRID)
    for name in ("a", "b"):
        assert _run("generate-data", "--config", path, "--seed", 1, "--out", root / name) == 0
        assert _run("infer", "--config", path, "--seed", 1, "--method", "mc", "--out", root / name) == 0
    assert _run("generate-data", "--config", path, "--seed", 1, "--out", root / "r") == 0
    assert _run("infer", "--config", path, "--seed", 1, "--method", "random", "--out", root / "r") == 0
    return root, path


def test_artifacts_written(grid_runs):
    root, _ = grid_runs
    for name in ("observations.csv", "test.csv", "data.json", "metrics.json", "surface.json", "evaluations.csv",
                 "chain.csv", "density.csv"):
        assert (root / "a" / name).exists(), name
    assert not (root / "r" / "surface.json").exists()


def test_reruns_are_byte_identical(grid_runs):
    root, _ = grid_runs
    for name in ("observations.csv", "test.csv", "metrics.json", "chain.csv", "density.csv", "surface.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_artifacts_carry_provenance(grid_runs):
    root, _ = grid_runs
    payload = json.loads((root / "a" / "metrics.json").read_text())
    assert payload["config"]["seed"] == 1 and payload["config"]["method"] == "mc"
    assert set(payload["seeds"]) >= {"master", "bo", "mcmc"}
    assert (root / "a" / "observations.csv").read_text().startswith("#")
    m = payload["metrics"]
    assert m["n_evaluations"] + m["n_skipped"] == 10
    assert np.isfinite(m["rmse"]) and np.isfinite(m["prediction_error"])
    lower, upper = -1.0, 0.0
    assert lower <= m["posterior_mean"][0] <= upper


def test_random_method_reports_expected_error(grid_runs):
    root, _ = grid_runs
    m = json.loads((root / "r" / "metrics.json").read_text())["metrics"]
    assert m["method"] == "random"
    # one dimension: E|U - 1/2| for U uniform on the unit interval
    assert m["expected_rmse"] == pytest.approx(0.25, abs=0.005)


def test_overwrite_guard(grid_runs, capsys):
    root, path = grid_runs
    before = (root / "a" / "observations.csv").read_bytes()
    assert _run("generate-data", "--config", path, "--seed", 2, "--out", root / "a") == 2
    assert "overwrite" in capsys.readouterr().err
    assert (root / "a" / "observations.csv").read_bytes() == before
    assert _run("infer", "--config", path, "--seed", 1, "--out", root / "a") == 2


def test_infer_without_data_fails_cleanly(tmp_path):
    path = _write_config(tmp_path, SMALL_GRID)
    assert _run("infer", "--config", path, "--out", tmp_path / "empty") == 2


def test_report_tabulates_runs(grid_runs, capsys):
    root, _ = grid_runs
    assert _run("report", "--out", root) == 0
    text = capsys.readouterr().out
    assert (root / "report.csv").read_text() == text
    summary = text.split("\n\n")[1].splitlines()
    assert summary[0] == "method,n,rmse_mean,rmse_sd,prediction_error_mean"
    assert [line.split(",")[:2] for line in summary[1:]] == [["mc", "2"], ["random", "1"]]


def test_report_on_empty_directory(tmp_path):
    assert _run("report", "--out", tmp_path) == 2


# -- menu and runtime ---------------------------------------------------------------------------

def test_menu_pipeline_small():
    cfg = ex.resolve_config(SMALL_MENU, seed=2)
    data = ex.generate_data(cfg)
    assert data["observations"].kind == "menu" and data["test"] is None
    res = ex.infer(cfg, data["observations"], None)
    b = ex.bounds_for(cfg)
    assert np.all(b.contains(res["chain"].samples))
    assert res["surface"].kind == "abc" and np.isfinite(res["metrics"]["epsilon"])
    assert len(res["records"]) == 6


def test_runtime_benchmark_command(tmp_path):
    cfg = {"experiment": "runtime", "sizes": [3, 5], "repetitions": 2, "n_observations": 20, "n_mc": 50}
    path = _write_config(tmp_path, cfg)
    assert _run("benchmark-runtime", "--config", path, "--out", tmp_path / "rt") == 0
    lines = [l for l in (tmp_path / "rt" / "runtime.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "w,rep,method,seconds" and len(lines) == 1 + 2 * 2 * 3
    summary = json.loads((tmp_path / "rt" / "runtime_summary.json").read_text())["summary"]
    assert set(summary) == {"exact", "mc", "abc"} and summary["mc"]["5"]["n"] == 2


@pytest.mark.parametrize("name", ["grid-inference", "grid-smoke", "menu", "runtime"])
def test_shipped_configs_resolve(name):
    path = Path(__file__).parent.parent / "configs" / f"{name}.yaml"
    cfg = ex.load_config(path)
    assert cfg["experiment"] in ex.EXPERIMENTS
