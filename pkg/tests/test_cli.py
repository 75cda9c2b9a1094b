import json
import subprocess
import sys

import numpy as np
import pytest

from famm import __version__
from famm.cli import main
from famm.io import read_matrix_csv, read_term_estimate, read_wide_csv, write_wide_csv
from famm.simulation import rimse
from famm.spec import load_model_spec, spec_hash


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--scenario", "2", "--M", "8", "--ni", "3", "--T", "20",
                 "--write-data", str(d)]) == 0
    return d


def test_version(capsys):
    code, out, _ = run(["version"], capsys)
    assert code == 0 and out.strip() == __version__


def test_console_script():
    res = subprocess.run([sys.executable, "-m", "famm.cli", "version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == __version__


def test_fit_end_to_end(sim_dir, tmp_path, capsys):
    out = tmp_path / "fit"
    code, stdout, err = run(["fit", "--spec", sim_dir / "spec.json", "--out", out, "--seed", 3], capsys)
    assert code == 0, err
    summary = json.loads((out / "summary.json").read_text())
    spec = load_model_spec(sim_dir / "spec.json")
    spec.optimizer.seed = 3
    assert summary["spec_hash"] == spec_hash(spec)
    assert summary["seed"] == 3
    for key in ("lambda", "sigma2_eps", "edf", "reml_value", "converged"):
        assert key in summary
    for label in summary["terms"]:
        header, data = read_term_estimate(out / "terms" / f"{label.replace(':', '_')}.csv")
        assert header[-4:] == ["estimate", "se", "ci_lo", "ci_hi"]
        assert np.all(data[:, -2] <= data[:, -4]) and np.all(data[:, -4] <= data[:, -1])
    assert (out / "plots" / "intercept_t.svg").exists()
    assert (out / "plots" / "functional_linear_x1.svg").exists()
    grid, cov = read_matrix_csv(out / "residual_covariance.csv")
    assert cov.shape == (grid.size, grid.size)

    fitted = np.genfromtxt(out / "fitted.csv", delimiter=",", names=True)
    truth = np.genfromtxt(sim_dir / "truth.csv", delimiter=",", names=True)
    np.testing.assert_array_equal(fitted["curve_id"], truth["curve_id"])
    T = np.unique(truth["t"]).size
    assert rimse(fitted["fitted"], truth["predictor"], np.unique(truth["t"])) < 0.1
    assert fitted.size % T == 0


def test_fit_is_reproducible(sim_dir, tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["fit", "--spec", sim_dir / "spec.json", "--out", tmp_path / name], capsys)[0] == 0
    for f in ("summary.json", "fitted.csv", "terms/intercept_t.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_malformed_csv_exit_2(sim_dir, tmp_path, capsys):
    bad = tmp_path / "responses.csv"
    lines = (sim_dir / "responses.csv").read_text().splitlines()
    lines[4] = "1,zero,2.0"
    bad.write_text("\n".join(lines) + "\n")
    code, _, err = run(["fit", "--spec", sim_dir / "spec.json", "--responses", bad,
                        "--out", tmp_path / "o"], capsys)
    assert code == 2
    assert "line 5" in err


def test_bad_spec_exit_2(tmp_path, capsys):
    p = tmp_path / "spec.json"
    p.write_text('{"terms": [{"kind": "nonsense"}]}')
    code, _, err = run(["fit", "--spec", p, "--responses", p, "--out", tmp_path], capsys)
    assert code == 2 and "terms/0/kind" in err


def test_unwritable_out_exit_3(sim_dir, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(["fit", "--spec", sim_dir / "spec.json", "--out", blocker / "sub"], capsys)
    assert code == 3 and "I/O error" in err


def test_simulate_deterministic(tmp_path, capsys):
    args = ["simulate", "--scenario", "1", "--M", "4", "--ni", "2", "--T", "10", "--reps", "2", "--seed", "4"]
    assert run(args + ["--out", tmp_path / "a.csv"], capsys)[0] == 0
    assert run(args + ["--out", tmp_path / "b.csv", "--workers", "2"], capsys)[0] == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    assert a.decode().splitlines()[0] == "scenario,M,ni,T,snr_b,snr_eps,rep,component,rimse,coverage,seconds,converged"


def test_simulate_rejects_scenario(tmp_path, capsys):
    code, _, err = run(["simulate", "--scenario", "9", "--out", tmp_path / "r.csv"], capsys)
    assert code == 2 and "scenario" in err


def test_fpca_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    grid = np.linspace(0, 1, 30)
    phi = np.sqrt(2) * np.sin(2 * np.pi * grid)
    curves = rng.normal(size=(80, 1)) * phi + rng.normal(0, 0.05, (80, 30))
    write_wide_csv(tmp_path / "c.csv", grid, range(1, 81), curves)
    code, _, _ = run(["fpca", "--curves", tmp_path / "c.csv", "--out", tmp_path / "o",
                      "--n-components", 1], capsys)
    assert code == 0
    g, ids, eta = read_wide_csv(tmp_path / "o" / "eigenfunctions.csv")
    assert ids == [1]
    w = np.gradient(g)
    assert abs(np.sum(w * eta[0] * phi)) > 0.99


def test_check_identifiability(tmp_path, capsys):
    grid = np.linspace(0, 1, 20)
    rng = np.random.default_rng(1)
    rich = rng.normal(size=(40, 6)) @ np.vstack([np.cos(k * np.pi * grid) for k in range(6)])
    # zero-mean curves leave constants, the order-1 nullspace, in the kernel
    zero_mean = rng.normal(size=(40, 1)) * np.sin(2 * np.pi * grid)
    write_wide_csv(tmp_path / "rich.csv", grid, range(1, 41), rich)
    write_wide_csv(tmp_path / "zero_mean.csv", grid, range(1, 41), zero_mean)
    code, out, _ = run(["check-identifiability", "--functional", f"x={tmp_path / 'rich.csv'}"], capsys)
    assert code == 0 and out.startswith("covariate,effective_rank,overlap")
    code, out, _ = run(["check-identifiability", "--functional", f"x={tmp_path / 'zero_mean.csv'}"], capsys)
    assert code == 1
    assert out.splitlines()[1].split(",")[1] == "1"
