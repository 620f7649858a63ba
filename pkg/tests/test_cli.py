import json

import numpy as np

from prednav.cli import main
from prednav.envgen import straight_corridor
from prednav.harness import SCENARIO_SCHEMA, SUITE_SCHEMA, ScenarioConfig, scenario_to_json


def write_scenario(tmp_path, **kw):
    env, start, goal = straight_corridor(length=5.0)
    sc = ScenarioConfig(environment=env, start=start, goal=goal, v_max=3.0,
                        prediction="none", seed=0, timeout=12.0, **kw)
    doc = scenario_to_json(sc)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    return path


def test_cli_run(tmp_path, capsys):
    scenario = write_scenario(tmp_path)
    rc = main(["run", "--scenario", str(scenario), "--outdir", str(tmp_path / "out")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "success" in out
    assert (tmp_path / "out" / "log.csv").exists()


def test_cli_run_invalid_scenario_exit_code(tmp_path, capsys):
    scenario = write_scenario(tmp_path)
    doc = json.loads(scenario.read_text())
    doc["start"] = [0.0, 1.0, 0.5, 0.0, 0.0]  # inside a wall
    scenario.write_text(json.dumps(doc))
    rc = main(["run", "--scenario", str(scenario), "--outdir", str(tmp_path / "out")])
    assert rc == 2


def test_cli_bench_and_plot(tmp_path, capsys):
    scenario_doc = json.loads(write_scenario(tmp_path).read_text())
    scenario_doc["repetitions"] = 2
    suite = {"schema": SUITE_SCHEMA, "scenarios": [scenario_doc]}
    suite_path = tmp_path / "suite.json"
    suite_path.write_text(json.dumps(suite))
    rc = main(["bench", "--suite", str(suite_path), "--outdir", str(tmp_path / "bench")])
    assert rc == 0
    assert (tmp_path / "bench" / "results.csv").exists()
    assert "Success Rate" in (tmp_path / "bench" / "results.txt").read_text()

    # plot the run log
    rc = main(["run", "--scenario", str(write_scenario(tmp_path)), "--outdir", str(tmp_path / "out")])
    assert rc == 0
    rc = main(["plot", str(tmp_path / "out" / "log.csv"), "--out", str(tmp_path / "plots" / "t.svg")])
    assert rc == 0
    assert (tmp_path / "plots" / "t.svg").exists()
    assert (tmp_path / "plots" / "t.csv").exists()


def test_cli_collect(tmp_path, capsys):
    scenario = write_scenario(tmp_path)
    rc = main(["collect", "--scenario", str(scenario), "--outdir", str(tmp_path / "ds"), "--stride", "3"])
    assert rc == 0
    assert (tmp_path / "ds" / "index.csv").exists()
    out = capsys.readouterr().out
    assert "training pairs" in out
