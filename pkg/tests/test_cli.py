import csv
import json
import re

import numpy as np
import pytest

from polytree import cli, scenarios
from polytree.errors import NumericalFailure
from polytree.tree import PolytopicTree

from test_traj import linear_system


@pytest.fixture(scope="module")
def toy_scenario(tmp_path_factory):
    s = linear_system([[1, 0.1], [0, 1]], [[0], [0.1]], [-1, -1], [1, 1], [-1], [1], [-0.2, -0.2], [0.2, 0.2])
    d = s.to_dict()
    d["name"] = "double_integrator"
    d["growth"] = {"T_max": 4, "k": 5, "soundness_samples": 200, "coverage_samples": 100}
    d["state_names"] = ["position", "velocity"]
    path = tmp_path_factory.mktemp("scn") / "di.json"
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def grown_dir(toy_scenario, tmp_path_factory):
    out = tmp_path_factory.mktemp("grow")
    rc = cli.main(["grow", "--scenario", str(toy_scenario), "--iters", "6", "--seed", "7", "--out-dir", str(out),
                   "--quiet"])
    assert rc == 0
    return out


def test_grow_outputs(grown_dir):
    names = {p.name for p in grown_dir.iterdir()}
    assert {"tree.json", "stats.csv", "solve_times.csv", "tree_0_1.svg", "coverage.svg"} <= names
    rows = list(csv.DictReader(open(grown_dir / "stats.csv")))
    assert len(rows) == 6
    assert rows[-1]["coverage"] != ""
    tree = PolytopicTree.load(grown_dir / "tree.json")
    svg = (grown_dir / "tree_0_1.svg").read_text()
    assert len(re.findall(r'id="node\d+"', svg)) == len(tree)


def test_grow_is_deterministic(toy_scenario, grown_dir, tmp_path):
    rc = cli.main(["grow", "--scenario", str(toy_scenario), "--iters", "6", "--seed", "7", "--out-dir",
                   str(tmp_path), "--quiet"])
    assert rc == 0
    assert (tmp_path / "tree.json").read_bytes() == (grown_dir / "tree.json").read_bytes()
    assert (tmp_path / "tree_0_1.svg").read_bytes() == (grown_dir / "tree_0_1.svg").read_bytes()


def test_grow_coverage_increases(grown_dir):
    tree = PolytopicTree.load(grown_dir / "tree.json")
    cov = [r["coverage"] for r in tree.stats if r.get("coverage") is not None]
    assert cov and cov[-1] >= 0.0


def test_missing_scenario_is_user_error(tmp_path):
    assert cli.main(["grow", "--scenario", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)]) == 3


def test_no_initial_branch_exit_code(tmp_path):
    s = linear_system([[1.0]], [[1.0]], [-1], [1], [-0.5], [0.5], [-1], [-0.9], c=np.array([1.0]))
    d = s.to_dict()
    d["growth"] = {"T_max": 2}
    path = tmp_path / "stuck.json"
    path.write_text(json.dumps(d))
    assert cli.main(["grow", "--scenario", str(path), "--iters", "1", "--out-dir", str(tmp_path), "--quiet"]) == 2


def test_config_errors(toy_scenario, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("growth: [1, 2\n")
    assert cli.main(["grow", "--scenario", str(toy_scenario), "--config", str(bad), "--quiet"]) == 3
    unknown = tmp_path / "unknown.yaml"
    unknown.write_text("milp.no_such_key: 1\n")
    assert cli.main(["grow", "--scenario", str(toy_scenario), "--config", str(unknown), "--quiet"]) == 3
    assert cli.main(["grow", "--scenario", str(toy_scenario), "--config", str(tmp_path / "x.yaml")]) == 3
    assert cli.main(["no-such-command"]) == 3


def test_dotted_config_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("milp.gap_tol: 0.01\ngrowth:\n  T_max: 3\nmilp:\n  backend: highs\n")
    cfg = cli.load_config(str(p))
    assert cfg == {"milp": {"gap_tol": 0.01, "backend": "highs"}, "growth": {"T_max": 3}}


def test_export_pendulum(tmp_path):
    out = tmp_path / "m.lp"
    assert cli.main(["export", "--scenario", "pendulum_wall", "--T", "5", "--out", str(out), "--quiet"]) == 0
    text = out.read_text()
    section = text.split("Binaries\n")[1].split("End")[0]
    assert len(section.split()) == 10
    assert cli.main(["export", "--scenario", "pendulum_wall", "--T", "0", "--out", str(out), "--quiet"]) == 3


def test_export_toy_solves_externally(toy_scenario, tmp_path):
    highspy = pytest.importorskip("highspy")
    from polytree.milp import MilpConfig, solve_milp
    from polytree.pwa import PWASystem
    from polytree.traj import TrajectoryQuery, build_model

    out = tmp_path / "toy.lp"
    assert cli.main(["export", "--scenario", str(toy_scenario), "--T", "1", "--out", str(out), "--quiet"]) == 0
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.readModel(str(out))
    h.run()
    s = PWASystem.load(toy_scenario)
    ours = solve_milp(build_model(TrajectoryQuery(s, 1, [s.goal])).model, MilpConfig(backend="bnb", gap_tol=1e-9))
    assert h.getInfo().objective_function_value == pytest.approx(ours.objective, abs=1e-6)


def test_validate(tmp_path, capsys):
    assert cli.main(["validate", "--scenario", "bouncing_ball", "--samples", "2000", "--out-dir", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "partition.csv")))
    assert float(rows[0]["coverage"]) == 1.0 and float(rows[0]["overlap"]) == 0.0
    assert "coverage 1.0000" in capsys.readouterr().out


def test_simulate(grown_dir, tmp_path):
    tree = PolytopicTree.load(grown_dir / "tree.json")
    x0 = tree.nodes[-1].polytope.xbar
    rc = cli.main(["simulate", "--tree", str(grown_dir / "tree.json"), "--x0", ",".join(map(str, x0)),
                   "--out-dir", str(tmp_path), "--quiet"])
    assert rc == 0
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["t", "position", "velocity", "u0", "branch", "node_id", "cost"]
    svg = (tmp_path / "trace_0_1.svg").read_text()
    path = re.search(r'<g id="trace">.*?d="([^"]+)"', svg, re.S).group(1)
    assert len(re.findall(r"[ML]", path)) == len(rows) - 1  # one vertex per state
    assert (tmp_path / "trace_signals.svg").exists()


def test_simulate_bad_inputs(grown_dir, tmp_path):
    tree = str(grown_dir / "tree.json")
    assert cli.main(["simulate", "--tree", tree, "--x0", "0.1", "--out-dir", str(tmp_path), "--quiet"]) == 3
    assert cli.main(["simulate", "--tree", tree, "--x0", "5,5", "--out-dir", str(tmp_path), "--quiet"]) == 3
    assert cli.main(["simulate", "--tree", str(tmp_path / "missing.json"), "--x0", "0,0", "--quiet"]) == 3
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["simulate", "--tree", str(tmp_path / "broken.json"), "--x0", "0,0", "--quiet"]) == 3


def test_coverage_command(grown_dir, tmp_path, capsys):
    tree = str(grown_dir / "tree.json")
    assert cli.main(["coverage", "--tree", tree, "--n", "0", "--out-dir", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["n_samples"] == 0
    assert cli.main(["coverage", "--tree", tree, "--n", "60", "--mpc-check", "--t-check", "40",
                     "--out-dir", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["mpc_feasible_at_V"] == summary["in_tree"]
    assert summary["mpc_feasible_within_t_check"] == summary["in_tree"]
    rows = list(csv.DictReader(open(tmp_path / "coverage.csv")))
    assert len(rows) == 60


def test_plot_command(grown_dir, tmp_path):
    tree = str(grown_dir / "tree.json")
    assert cli.main(["plot", "--tree", tree, "--proj", "1,0", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "tree_1_0.svg").exists()
    assert cli.main(["plot", "--tree", tree, "--proj", "0,2", "--out-dir", str(tmp_path)]) == 3
    assert cli.main(["plot", "--tree", tree, "--proj", "0,0", "--out-dir", str(tmp_path)]) == 3


def test_pushing_long_guard():
    system = scenarios.load("planar_pushing")

    class Args:
        seed, iters, t_max, long = 0, None, None, False

    assert cli.growth_config(system, {}, Args).iterations == 30
    Args.long = True
    assert cli.growth_config(system, {}, Args).iterations == 473


def test_numerical_failure_exit_code(monkeypatch):
    def boom(args, cfg):
        raise NumericalFailure("singular basis")

    monkeypatch.setattr(cli, "cmd_validate", boom)
    assert cli.main(["validate", "--scenario", "pendulum_wall"]) == 4
