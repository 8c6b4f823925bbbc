import json
import os
import subprocess
import sys

import pytest

from attnflow.cli import main

SIM = """variant: SA
beta: 1.0
n: 6
d: 3
seed: 4
t_end: 5
"""


def run(*args, env=None):
    return subprocess.run([sys.executable, "-m", "attnflow.cli", *args], capture_output=True,
                          text=True, env=env)


def test_simulate_writes_outputs_and_reruns(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(SIM)
    out = tmp_path / "a"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    files = sorted(os.listdir(out))
    assert files == ["clusters.csv", "energy.csv", "manifest.json", "trajectory.csv",
                     "trajectory.csv.json"]
    assert (out / "energy.csv").read_text().startswith("t,energy,dissipation\n")
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["beta"] == 1.0 and man["master_seed"] == 4
    assert all(man["invariants"].values())
    again = tmp_path / "b"
    assert main(["rerun", str(out / "manifest.json"), "--out", str(again)]) == 0
    for name in ("trajectory.csv", "energy.csv", "clusters.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(SIM)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--beta", "2.5", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["beta"] == 2.5


def test_config_errors_exit_1(tmp_path, capsys):
    cfg = tmp_path / "nobeta.yaml"
    cfg.write_text(SIM.replace("beta: 1.0\n", ""))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1
    assert "beta" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("variant: SA\nn: [6\n")
    assert main(["simulate", "--config", str(bad)]) == 1
    assert "line 3" in capsys.readouterr().err
    extra = tmp_path / "extra.yaml"
    extra.write_text(SIM + "colour: blue\n")
    assert main(["simulate", "--config", str(extra)]) == 1
    assert "colour" in capsys.readouterr().err
    assert main(["simulate", "--config", str(cfg), "--beta", "-1"]) == 1


def test_invariant_violation_exit_2(tmp_path):
    # a huge explicit step for USA at large beta breaks energy monotonicity
    cfg = tmp_path / "stiff.yaml"
    cfg.write_text("variant: USA\nbeta: 6\nn: 8\nd: 3\nseed: 1\nt_end: 5\ndt: 0.5\n"
                   "sample_every: 0.5\n")
    with pytest.warns(Warning):
        code = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")])
    assert code == 2


def test_output_dir_from_environment(tmp_path):
    env = dict(os.environ, ATTNFLOW_OUTPUT_DIR=str(tmp_path / "envout"))
    res = run("gamma", "--beta", "1", "--n", "8", "--t-end", "2", env=env)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "envout" / "gamma.csv").read_text().startswith("t,gamma\n")
    assert "t_star" in res.stdout


def test_landscape_modes(tmp_path, capsys):
    assert main(["landscape", "--n", "4", "--beta", "10", "--out", str(tmp_path / "l")]) == 0
    assert "STRICT_SADDLE" in capsys.readouterr().out
    rep = json.loads((tmp_path / "l" / "report.json").read_text())
    assert rep["classification"] == "STRICT_SADDLE"
    assert main(["landscape", "--mode", "tau-star", "--beta", "100",
                 "--out", str(tmp_path / "t")]) == 0
    assert main(["landscape", "--mode", "sweep-g", "--beta", "3", "--grid", "11",
                 "--out", str(tmp_path / "g")]) == 0
    assert len((tmp_path / "g" / "g_sweep.csv").read_text().splitlines()) == 12


def test_wendel_command(capsys):
    assert main(["wendel", "--n", "6", "--d", "3", "--mc", "2000", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "exact = 1/2" in out and "estimate" in out


def test_phase_diagram_and_pair_correlation(tmp_path):
    out = tmp_path / "pd"
    assert main(["phase-diagram", "--n", "4", "--d", "8", "--t-max", "4", "--t-steps", "3",
                 "--beta-max", "1", "--beta-steps", "2", "--reps", "4", "--threads", "2",
                 "--out", str(out)]) == 0
    assert (out / "phase_grid.csv").read_text().startswith("beta,t,prob,reps\n")
    assert (out / "gamma_curve.csv").read_text().startswith("beta,t_star\n")
    first = (out / "phase_grid.csv").read_bytes()
    assert main(["rerun", str(out / "manifest.json"), "--threads", "3"]) == 0
    assert (out / "phase_grid.csv").read_bytes() == first
    pc = tmp_path / "pc"
    assert main(["pair-correlation", "--n", "4", "--t", "1", "--reps", "40", "--bins", "8",
                 "--out", str(pc)]) == 0
    assert len((pc / "pair_correlation.csv").read_text().splitlines()) == 9
