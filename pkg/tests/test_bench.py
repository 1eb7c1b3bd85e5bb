import csv
import math
import statistics

import numpy as np
import pytest
import yaml

from helpers import random_dataset
from screenbo.bench import (
    METRICS,
    ConfigError,
    ExperimentConfig,
    expand_grid,
    preset,
    run_experiment,
    sweep,
)
from screenbo.cli import main
from screenbo.data_io import write_dataset

FAST = dict(n=40, budget=5.0, c_cheap=0.2, N=3, m_threshold=256, m_outer=64)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_presets_encode_experiment_settings():
    cfg, grid = preset("exp1")
    assert (cfg.c_cheap, cfg.workers, cfg.c_expensive, cfg.budget) == (0.2, 1, 1.0, 50.0)
    assert min(grid["theta"]) == 0.0 and max(grid["theta"]) == pytest.approx(math.pi / 2)
    cfg3, grid3 = preset("exp3")
    assert cfg3.theta == pytest.approx(math.pi / 4) and cfg3.c_cheap == 1.0
    assert min(grid3["workers"]) == 1 and max(grid3["workers"]) == 16
    cfg2, grid2 = preset("exp2")
    assert min(grid2["c_cheap"]) == 0.1 and max(grid2["c_cheap"]) == 0.5
    desk, _ = preset("exp1-desk")
    assert (desk.n, desk.trials, desk.budget) == (200, 100, 50.0)
    with pytest.raises(ConfigError):
        preset("nope")


def test_aggregate_matches_recomputation(tmp_path):
    cfg = ExperimentConfig(method="STR", trials=10, **FAST)
    out = tmp_path / "r.csv"
    res = run_experiment(cfg, out)
    rows = read_rows(out)
    trials = [r for r in rows if r["row_type"] == "trial"]
    assert len(trials) == 10
    for m in METRICS:
        vals = [float(r[m]) for r in trials]
        assert res["mean"][m] == pytest.approx(statistics.fmean(vals), abs=1e-12)
        assert res["se"][m] == pytest.approx(statistics.stdev(vals) / math.sqrt(10), abs=1e-12)
        mean_row = next(r for r in rows if r["row_type"] == "mean")
        assert float(mean_row[m]) == pytest.approx(statistics.fmean(vals), abs=1e-12)


def test_reward_regret_duality_in_results(tmp_path):
    res = run_experiment(ExperimentConfig(method="SGT", trials=3, **FAST))
    for r in res["rows"]:
        assert r["total_reward"] == FAST["N"] - r["mining_regret"]
        assert r["total_cost"] <= FAST["budget"] + 1e-9


@pytest.mark.parametrize("method", ["SGEI", "GT-Poor", "GT-Rich", "T-Poor", "T-Rich"])
def test_every_method_runs(method):
    res = run_experiment(ExperimentConfig(method=method, trials=1, **FAST))
    assert res["rows"][0]["expensive_tests"] > 0


def test_parallel_workers_config():
    res = run_experiment(ExperimentConfig(method="STR", trials=2, workers=3, **FAST))
    assert all(r["total_cost"] <= 5.0 + 1e-9 for r in res["rows"])


def test_results_byte_identical_and_process_pool_agrees(tmp_path, monkeypatch):
    cfg = ExperimentConfig(method="SGEI", trials=3, **FAST)
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    run_experiment(cfg, a)
    run_experiment(cfg, b)
    monkeypatch.setenv("SCREENBO_MAX_WORKERS", "2")
    run_experiment(cfg.updated(jobs=2), c)
    assert a.read_bytes() == b.read_bytes() == c.read_bytes()


def test_sweep_files_and_summary(tmp_path):
    base = ExperimentConfig(method="STR", trials=2, **FAST)
    rows = sweep(base, {"theta": [0.0, math.pi / 4, math.pi / 2]}, tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert len(files) == 4 and "summary.csv" in files
    assert len(read_rows(tmp_path / "summary.csv")) == len(rows) == 3


def test_sweep_without_grid_equals_single_run(tmp_path):
    base = ExperimentConfig(method="STR", trials=2, **FAST)
    sweep(base, {}, tmp_path / "s")
    run_experiment(base, tmp_path / "single.csv")
    point = next(p for p in (tmp_path / "s").iterdir() if p.name != "summary.csv")
    assert point.read_bytes() == (tmp_path / "single.csv").read_bytes()


def test_grid_collisions_are_config_errors():
    with pytest.raises(ConfigError):
        expand_grid({"output": ["a", "b"]})
    with pytest.raises(ConfigError):
        expand_grid({"not_a_field": [1]})
    with pytest.raises(ConfigError):
        expand_grid({"theta": []})
    assert len(expand_grid({"theta": [0, 1], "workers": [1, 2, 3]})) == 6


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(method="XYZ")
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=2, seeds=[1])
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=2, seeds=[1, 1])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(data="x.csv")
    assert ExperimentConfig(trials=3, seed=10).seed_list == [10, 11, 12]


def _real_files(tmp_path):
    data = random_dataset(np.random.default_rng(0), n=40, d=2)
    path = tmp_path / "data.csv"
    write_dataset(path, data)
    schema = tmp_path / "schema.yaml"
    schema.write_text(yaml.safe_dump({"features": ["x0", "x1"], "cheap": "cheap", "expensive": "expensive",
                                      "id_column": "id", "single_test_c_expensive": 2.0}))
    return path, schema


def test_real_data_with_refit(tmp_path):
    path, schema = _real_files(tmp_path)
    cfg = ExperimentConfig(method="SGT", data=str(path), schema=str(schema), trials=2, refit_every=5,
                           budget=6.0, c_cheap=0.2, N=3, m_threshold=256, m_outer=64)
    res = run_experiment(cfg)
    assert len(res["rows"]) == 2
    poor = run_experiment(cfg.updated(method="T-Poor", trials=1))
    # single-test runs use the schema's cost override for the expensive test
    assert poor["rows"][0]["expensive_tests"] == 3


# -- command line ------------------------------------------------------------


def test_cli_round_trip(tmp_path, capsys):
    data = tmp_path / "syn.csv"
    assert main(["gen-synth", "--n", "30", "--seed", "1", "-o", str(data)]) == 0
    schema = tmp_path / "s.yaml"
    schema.write_text(yaml.safe_dump({"features": ["x0"], "cheap": "cheap", "expensive": "expensive", "id_column": "id"}))
    assert main(["validate-data", "--data", str(data), "--schema", str(schema)]) == 0
    assert '"rows": 30' in capsys.readouterr().out
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"method": "STR", "n": 30, "budget": 3.0, "N": 3, "trials": 2}))
    out = tmp_path / "r.csv"
    assert main(["run", "--config", str(cfg), "-o", str(out)]) == 0
    assert len(read_rows(out)) == 4
    assert main(["sweep", "--config", str(cfg), "--grid", "theta=0,1.5", "--methods", "STR,SGEI",
                 "--output-dir", str(tmp_path / "sw")]) == 0
    assert len(read_rows(tmp_path / "sw" / "summary.csv")) == 4


def test_cli_errors(tmp_path, capsys):
    assert main(["run", "--method", "NOPE"]) == 2
    assert "config error" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,cheap\n1,2\n")
    schema = tmp_path / "s.yaml"
    schema.write_text(yaml.safe_dump({"features": ["x0"], "cheap": "cheap", "expensive": "expensive"}))
    assert main(["validate-data", "--data", str(bad), "--schema", str(schema)]) == 3
    assert "missing column" in capsys.readouterr().err
    assert main(["sweep", "--grid", "output=a", "--output-dir", str(tmp_path / "x")]) == 2
    assert main(["run", "--preset", "exp1", "--config", "x.yaml"]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])
