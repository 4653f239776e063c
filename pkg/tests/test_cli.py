from __future__ import annotations

import hashlib
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from conftest import noiseless_instance
from linesdr import save_graph
from linesdr.camera import random_rotation, rotation_graph_to_dict, synthetic_scene
from linesdr.cli import build_parser, dispatch, resolve


@pytest.fixture
def graph_file(tmp_path):
    g, truth = noiseless_instance(12, seed=4)
    p = tmp_path / "g.json"
    save_graph(p, g, truth)
    return p


@pytest.fixture
def camera_file(tmp_path):
    scene = synthetic_scene(8, 60, seed=2)
    obj = rotation_graph_to_dict(scene.rot_graph)
    r = np.random.default_rng(0)
    for k in (1, 9, 20):
        obj["edges"][k]["R"] = random_rotation(r).ravel().tolist()
    p = tmp_path / "rot.json"
    p.write_text(json.dumps(obj))
    return p


def digest(p) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


NOISELESS_FLAGS = ["--mu", "1e4", "--mu-adapt", "off", "--tol", "1e-8"]


# ---------------------------------------------------------------- subcommands

def test_solve_noiseless(graph_file, tmp_path, schemas):
    out = tmp_path / "s.json"
    before = digest(graph_file)
    assert dispatch(["solve", "--input", str(graph_file), "--out", str(out), *NOISELESS_FLAGS]) == 0
    sol = json.loads(out.read_text())
    jsonschema.validate(sol, schemas["solution"])
    assert sol["spectral_gap"] >= 1 - 1e-6
    assert sol["nrmse"] <= 1e-4
    assert "seconds" not in sol
    assert digest(graph_file) == before


def test_solve_timings_flag(graph_file, tmp_path):
    out = tmp_path / "s.json"
    assert dispatch(["--timings", "solve", "--input", str(graph_file), "--out", str(out), "--max-iters", "50"]) == 0
    assert "seconds" in json.loads(out.read_text())


def test_rigidity_to_stdout(graph_file, capsys, schemas):
    assert dispatch(["rigidity-test", "--input", str(graph_file), "--components"]) == 0
    rep = json.loads(capsys.readouterr().out)
    jsonschema.validate(rep, schemas["rigidity_report"])
    assert rep["verdict"] == "rigid"


def test_solve_dist(graph_file, tmp_path, schemas):
    out = tmp_path / "d.json"
    assert dispatch(["solve-dist", "--input", str(graph_file), "--out", str(out), "--nmax", "8",
                     *NOISELESS_FLAGS]) == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, schemas["distributed_report"])
    assert "timings" not in rep


def test_camera_lines(camera_file, tmp_path, schemas):
    out, report = tmp_path / "lines.json", tmp_path / "cam.json"
    before = digest(camera_file)
    assert dispatch(["camera-lines", "--input", str(camera_file), "--out", str(out), "--rule", "topfrac:0.1",
                     "--rounds", "2", "--report", str(report)]) == 0
    jsonschema.validate(json.loads(out.read_text()), schemas["measurement_graph"])
    rep = json.loads(report.read_text())
    jsonschema.validate(rep, schemas["camera_report"])
    assert rep["pruned_edges"] == 3  # ceil(0.1 * 28)
    assert digest(camera_file) == before


def test_camera_lines_solver_failure(tmp_path):
    # every correspondence back-projects to parallel rays, so no edge yields a line
    obj = {"n": 3, "focal": [1.0] * 3, "edges": [
        {"i": i, "j": j, "R": np.eye(3).ravel().tolist(), "pairs": [[0, 0, 0, 0], [1, 2, 1, 2]]}
        for i, j in [(0, 1), (1, 2), (0, 2)]]}
    p = tmp_path / "rot.json"
    p.write_text(json.dumps(obj))
    assert dispatch(["camera-lines", "--input", str(p), "--out", str(tmp_path / "o.json")]) == 2


def test_bench_deterministic_csv(tmp_path, schemas):
    args = ["bench", "--n", "10", "--sigma", "0.05", "--p", "0", "--trials", "2", "--solvers", "sdr,ls",
            "--seed", "7", "--theta", "0.6", "--max-iters", "200"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert dispatch([*args, "--out", str(a)]) == 0
    assert dispatch([*args, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "solver,sigma,p,trial,nrmse,spectral_gap,seconds"
    jsonschema.validate(json.loads(a.with_suffix(".json").read_text()), schemas["bench_report"])


# ---------------------------------------------------------------- errors

def test_malformed_json_exit_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"d": 3,\n "n": }')
    assert dispatch(["solve", "--input", str(p), "--out", str(tmp_path / "s.json")]) == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["solve", "--input", "x.json"],
    ["solve", "--bogus", "1"],
    ["bench", "--out", "r.csv", "--sigma", "a,b"],
    ["solve", "--input", "x", "--out", "y", "--mu-adapt", "maybe"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert dispatch(argv) == 1
    assert "error" in capsys.readouterr().err


def test_missing_input_exit_1(tmp_path):
    assert dispatch(["solve", "--input", str(tmp_path / "none.json"), "--out", str(tmp_path / "s.json")]) == 1


def test_output_must_differ_from_input(graph_file):
    before = digest(graph_file)
    assert dispatch(["solve", "--input", str(graph_file), "--out", str(graph_file)]) == 1
    assert digest(graph_file) == before


def test_disconnected_graph_exit_1(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"d": 2, "n": 4, "edges": [{"i": 0, "j": 1, "gamma": [1, 0]},
                                                       {"i": 2, "j": 3, "gamma": [0, 1]}]}))
    assert dispatch(["solve", "--input", str(p), "--out", str(tmp_path / "s.json")]) == 1


# ---------------------------------------------------------------- config merging

def _resolve(argv):
    return resolve(build_parser().parse_args(argv))


def test_config_values_and_flag_precedence(tmp_path, graph_file):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[solve]\nmu = 5.0\ntol = 1e-7\nmu-adapt = false\n')
    v = _resolve(["--config", str(cfg), "solve", "--input", str(graph_file), "--out", str(tmp_path / "s.json"),
                  "--mu", "2"])
    assert v["mu"] == 2.0 and v["tol"] == 1e-7 and v["mu_adapt"] is False


def test_flat_config(tmp_path, graph_file):
    cfg = tmp_path / "c.toml"
    cfg.write_text('max_iters = 77\n')
    v = _resolve(["--config", str(cfg), "solve", "--input", str(graph_file), "--out", str(tmp_path / "s.json")])
    assert v["max_iters"] == 77


@pytest.mark.parametrize("text", ['[solve]\nfoo = 1\n', '[nope]\nmu = 1\n', '[solve]\nmu = "x"\n', 'mu = [1, 2]\n',
                                  'mu = \n'])
def test_config_rejected(tmp_path, graph_file, text):
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    assert dispatch(["--config", str(cfg), "solve", "--input", str(graph_file),
                     "--out", str(tmp_path / "s.json")]) == 1


def test_bench_config_lists(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[bench]\nsigma = [0.0, 0.01]\np = 0.05\nfresh-graph = true\n')
    v = _resolve(["--config", str(cfg), "bench", "--out", str(tmp_path / "r.csv")])
    assert v["sigma"] == [0.0, 0.01] and v["p"] == [0.05] and v["fresh_graph"] is True


# ---------------------------------------------------------------- process boundary

def test_entry_point_streams(graph_file, tmp_path):
    out = tmp_path / "s.json"
    proc = subprocess.run([sys.executable, "-m", "linesdr", "--log-level", "INFO", "solve", "--input", str(graph_file),
                           "--out", str(out), "--max-iters", "30"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout == ""
    assert "level=" in proc.stderr
    assert json.loads(out.read_text())["iters"] <= 30
