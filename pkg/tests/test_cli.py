import csv
import hashlib
import json

import numpy as np
import pytest

from neurostab.cli import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main
from neurostab.gcnet import load_weights, save_weights

# initial conditions spread over the sampling box, one per quadrant of the (y, z) plane
SHOWCASE_X0 = [
    [-4.0, 0.0, 0.0, 0.0, 0.0],
    [5.0, 0.0, 5.0, 0.0, 0.0],
    [-8.0, 2.0, -6.0, -1.0, 0.5],
    [3.0, -3.0, 8.0, 2.0, -0.6],
]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_db(tmp_path_factory):
    out = tmp_path_factory.mktemp("db") / "db.csv"
    assert run("generate-data", "--n-traj", 4, "--seed", 3, "--out", out) == EXIT_OK
    return out


@pytest.fixture
def lqr_file(tmp_path, lqr):
    path = tmp_path / "lqr.json"
    save_weights(lqr, path)
    return path


@pytest.fixture(scope="module")
def desk_file(tmp_path_factory, desk):
    path = tmp_path_factory.mktemp("desk") / "net.json"
    save_weights(desk.net, path)
    return path


# -- generate-data -------------------------------------------------------------------------


def test_generate_data_is_deterministic(small_db, tmp_path):
    again = tmp_path / "again.csv"
    assert run("generate-data", "--n-traj", 4, "--seed", 3, "--out", again) == EXIT_OK
    assert sha(again) == sha(small_db)
    assert len(small_db.read_text().splitlines()) == 1 + 4 * 59


def test_config_sidecar_reruns(small_db, tmp_path):
    cfg = small_db.with_name("db.config.json")
    saved = json.loads(cfg.read_text())
    assert saved["n_traj"] == 4 and saved["seed"] == 3 and saved["command"] == "generate-data"
    out = tmp_path / "rerun.csv"
    assert run("generate-data", "--config", cfg, "--out", out) == EXIT_OK
    assert sha(out) == sha(small_db)


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("NEUROSTAB_OUT", str(tmp_path / "base"))
    assert run("generate-data", "--n-traj", 1, "--out", "nested/db.csv") == EXIT_OK
    assert (tmp_path / "base" / "nested" / "db.csv").exists()
    assert (tmp_path / "base" / "nested" / "db.meta.json").exists()


def test_bounds_file(tmp_path):
    bounds = [[1, 2], [0, 0.5], [-2, -1], [0, 0.5], [0, 0.1]]
    bf = tmp_path / "b.json"
    bf.write_text(json.dumps(bounds))
    out = tmp_path / "db.csv"
    assert run("generate-data", "--n-traj", 1, "--bounds-file", bf, "--out", out) == EXIT_OK
    first = np.loadtxt(out, delimiter=",", skiprows=1)[0, :5]
    assert np.all(first >= np.array(bounds)[:, 0]) and np.all(first <= np.array(bounds)[:, 1])


def test_invalid_input_exit_code(tmp_path):
    bf = tmp_path / "b.json"
    bf.write_text(json.dumps([[1, 0]] * 5))
    assert run("generate-data", "--n-traj", 1, "--bounds-file", bf, "--out", tmp_path / "x.csv") == EXIT_INVALID
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_traj": 1, "bogus": 3}))
    assert run("generate-data", "--config", cfg) == EXIT_INVALID
    assert run("generate-data", "--config", tmp_path / "missing.json") == EXIT_INVALID


def test_numerical_failure_exit_code(tmp_path):
    bf = tmp_path / "far.json"
    bf.write_text(json.dumps([[1000, 1001], [0, 1], [0, 1], [0, 1], [0, 0.1]]))
    code = run("generate-data", "--n-traj", 1, "--bounds-file", bf, "--max-failures", 2,
               "--out", tmp_path / "x.csv")
    assert code == EXIT_NUMERIC


def test_missing_required_argument():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


# -- train -------------------------------------------------------------------------------------


def test_train_outputs(small_db, tmp_path):
    out = tmp_path / "net.json"
    assert run("train", "--db", small_db, "--arch", "2x8", "--epochs", 3, "--batch-size", 32,
               "--out", out) == EXIT_OK
    net = load_weights(out)
    assert net.architecture == (8, 8)
    rows = list(csv.DictReader(open(tmp_path / "net.metrics.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert json.loads((tmp_path / "net.config.json").read_text())["arch"] == "2x8"


def test_train_default_architecture(small_db, tmp_path):
    out = tmp_path / "net.json"
    assert run("train", "--db", small_db, "--epochs", 1, "--out", out) == EXIT_OK
    assert load_weights(out).architecture == (32, 32, 32)


@pytest.mark.parametrize("arch", ["3", "0x4", "axb"])
def test_train_rejects_bad_architecture(small_db, tmp_path, arch):
    assert run("train", "--db", small_db, "--arch", arch, "--out", tmp_path / "n.json") == EXIT_INVALID


def test_train_rejects_missing_database(tmp_path):
    assert run("train", "--db", tmp_path / "nope.csv", "--out", tmp_path / "n.json") == EXIT_INVALID


# -- analysis commands ---------------------------------------------------------------------------


def test_analyze(lqr_file, tmp_path):
    out = tmp_path / "margins.json"
    assert run("analyze", "--net", lqr_file, "--out", out) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["stable"] is True
    assert rep["tau_star_refined"] > 0 and rep["zeta10"] > 0 and rep["T"] is None
    assert rep["config"]["tau_max"] == 10.0
    for key in ("zeta10", "T", "tau_star_pade", "tau_star_refined"):
        assert key in rep


def test_analyze_rejects_bad_network(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert run("analyze", "--net", bad) == EXIT_INVALID
    assert run("analyze", "--net", tmp_path / "missing.json") == EXIT_INVALID


@pytest.mark.filterwarnings("ignore:root tracking ambiguous")
@pytest.mark.parametrize("grid,n", [("log1e-3:0.05:20", 20), ("0.01:0.05:5", 5), ("0.01,0.02,0.04", 3)])
def test_root_locus(lqr_file, tmp_path, grid, n):
    out = tmp_path / "rl.csv"
    assert run("root-locus", "--net", lqr_file, "--tau-grid", grid, "--out", out) == EXIT_OK
    rows = list(csv.reader(open(out)))
    assert rows[0][0] == "tau" and len(rows[0]) == 11 and len(rows) == n + 1


@pytest.mark.parametrize("grid", ["0.2,0.1", "0:1:3", "a:b:c", "-1,2"])
def test_root_locus_bad_grid(lqr_file, grid):
    assert run("root-locus", "--net", lqr_file, f"--tau-grid={grid}") == EXIT_INVALID


def test_taylor_map(lqr_file, tmp_path):
    out = tmp_path / "maps"
    assert run("taylor-map", "--net", lqr_file, "--x0", -1, 0, 0, 0, 0, "--order", 3,
               "--tf", 2.0, "--horizon-factor", 1.5, "--out", out) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["T"] == pytest.approx(3.0) and len(summary["b_final"]) == 3
    lines = (out / "maps.jsonl").read_text().splitlines()
    assert len(lines) == summary["n_steps"]
    assert json.loads(lines[-1])["t"] == pytest.approx(3.0)
    header = next(csv.reader(open(out / "radius.csv")))
    assert header == ["t", "b_1", "b_2", "b_3", "epsilon"]
    assert (out / "config.json").exists()


@pytest.mark.parametrize("extra", [["--order", "9"], ["--order", "0"], ["--tf", "-1"],
                                   ["--horizon-factor", "0"]])
def test_taylor_map_validation(lqr_file, tmp_path, extra):
    assert run("taylor-map", "--net", lqr_file, "--tf", 1.0, *extra, "--out", tmp_path / "m") == EXIT_INVALID


def test_simulate_with_and_without_delay(lqr_file, tmp_path):
    for delay in (0.0, 0.01):
        out = tmp_path / f"traj_{delay}.csv"
        assert run("simulate", "--net", lqr_file, "--x0", 1, 0, -1, 0, 0.1, "--delay", delay,
                   "--t-final", 8, "--out", out) == EXIT_OK
        data = np.loadtxt(out, delimiter=",", skiprows=1)
        assert data[0, 0] == 0.0 and data[-1, 0] == pytest.approx(8.0)
        assert np.linalg.norm(data[-1, 1:6]) < 1e-2
    assert run("simulate", "--net", lqr_file, "--x0", 0, 0, 0, 0, 0, "--delay", -1) == EXIT_INVALID


# -- trained controller --------------------------------------------------------------------------


@pytest.mark.parametrize("x0", SHOWCASE_X0)
def test_trained_controller_reaches_target(desk_file, tmp_path, x0):
    out = tmp_path / "traj.csv"
    assert run("simulate", "--net", desk_file, "--x0", *x0, "--t-final", 10, "--out", out) == EXIT_OK
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    assert np.linalg.norm(data[-1, 1:6]) < 1e-2
    assert np.all((data[:, 6] >= 0) & (data[:, 6] <= 1)) and np.all(np.abs(data[:, 7]) <= 1)
