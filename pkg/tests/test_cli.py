import csv
import io

import numpy as np
import pytest

from lmm_fixedm.cli import main
from lmm_fixedm.inference import fixedm_interval
from lmm_fixedm.model import Dataset, ModelSpec, write_csv
from oracles import q1_profile_grid

SMALL_SCENARIO = """
m = 3
n = 15
beta0 = 1.0
sigma0_sq = 1.0
alpha = 1
gamma = 1
reps = 8
seed = 5
methods = both
"""


def read_rows(text):
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture
def toy_csv(tmp_path):
    rng = np.random.default_rng(3)
    ids, ys, xs, zs = [], [], [], []
    for i, b in enumerate([1.5, -1.0]):
        n = 12
        x = rng.standard_normal(n)
        z = rng.standard_normal(n)
        ys.append(0.5 * x + b * z + 0.7 * rng.standard_normal(n))
        ids += [i + 1] * n
        xs.append(x)
        zs.append(z)
    data = Dataset.from_arrays(ids, np.concatenate(ys), np.concatenate(xs)[:, None], np.concatenate(zs)[:, None])
    path = tmp_path / "toy.csv"
    write_csv(data, path)
    return path, data


def test_fit_smoke_matches_grid(toy_csv, tmp_path, capsys):
    path, data = toy_csv
    out = tmp_path / "fit.csv"
    assert main(["fit", "--data", str(path), "--random", "1", "--out", str(out)]) == 0
    rows = dict(read_rows(out.read_text())[1:])
    assert rows["converged"] == "1" and rows["m"] == "2"
    grid = np.arange(0.0, 50.0, 1e-3)
    best = grid[np.argmin(q1_profile_grid(data, ModelSpec((), (1,)), grid))]
    assert 0 < best < 49
    assert float(rows["theta_1"]) == pytest.approx(best, abs=2e-3)
    assert float(rows["sigma2_1"]) == pytest.approx(float(rows["theta_1"]) * float(rows["v2"]), rel=1e-5)


def test_fit_to_stdout(toy_csv, capsys):
    path, _ = toy_csv
    assert main(["fit", "--data", str(path), "--fixed", "1", "--random", "1"]) == 0
    rows = read_rows(capsys.readouterr().out)
    assert rows[0] == ["key", "value"]
    assert "beta_1" in dict(rows[1:])


def test_fixed_index_out_of_bounds(toy_csv, capsys):
    path, _ = toy_csv
    assert main(["fit", "--data", str(path), "--fixed", "1,2", "--random", "1"]) == 1
    assert "index out of bounds" in capsys.readouterr().err


def test_constant_response_is_degenerate(tmp_path, capsys):
    path = tmp_path / "const.csv"
    path.write_text("cluster,y,x1,z1\n1,2,1,0.5\n1,2,1,1.5\n2,2,1,-1\n2,2,1,0.3\n")
    assert main(["fit", "--data", str(path), "--fixed", "1", "--random", "1"]) == 2
    assert "degenerate" in capsys.readouterr().err


def test_malformed_csv_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("cluster,y,x1,z1\n1,2,1,0.5\n1,oops,1,1.5\n")
    assert main(["fit", "--data", str(path), "--random", "1"]) == 1
    assert "line 3" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--random", "1"]) == 1


def test_ci_both_methods(toy_csv, capsys):
    path, _ = toy_csv
    assert main(["ci", "--data", str(path), "--fixed", "1", "--random", "1", "--method", "both"]) == 0
    rows = read_rows(capsys.readouterr().out)
    assert rows[0] == ["k", "method", "lower", "upper", "level"]
    assert [r[:2] for r in rows[1:]] == [["1", "classical-normal"], ["1", "fixedm-chisquare"]]


def test_ci_fixedm_values(toy_csv, capsys):
    path, _ = toy_csv
    main(["fit", "--data", str(path), "--random", "1"])
    s2 = float(dict(read_rows(capsys.readouterr().out)[1:])["sigma2_1"])
    assert main(["ci", "--data", str(path), "--random", "1", "--method", "fixedm", "--level", "0.9"]) == 0
    (row,) = read_rows(capsys.readouterr().out)[1:]
    lo, hi = fixedm_interval(s2, 2, 0.9)
    assert float(row[2]) == pytest.approx(lo, rel=1e-5)
    assert float(row[3]) == pytest.approx(hi, rel=1e-5)
    assert row[4] == "0.9"


def test_ci_bad_level(toy_csv, capsys):
    path, _ = toy_csv
    assert main(["ci", "--data", str(path), "--random", "1", "--level", "1.5"]) == 1
    assert "level" in capsys.readouterr().err


def test_predict(toy_csv, capsys):
    path, _ = toy_csv
    assert main(["predict", "--data", str(path), "--fixed", "1", "--random", "1"]) == 0
    rows = read_rows(capsys.readouterr().out)
    assert rows[0] == ["cluster", "k", "blup", "ls"]
    assert len(rows) == 3
    for r in rows[1:]:
        assert abs(float(r[2])) <= abs(float(r[3]))


def test_simulate_is_deterministic(tmp_path, capsys):
    scn = tmp_path / "s.scn"
    scn.write_text(SMALL_SCENARIO)
    outs = []
    for i, threads in enumerate(["1", "1", "3"]):
        out = tmp_path / f"run{i}"
        assert main(["simulate", "--scenario", str(scn), "--out", str(out), "--threads", threads]) == 0
        outs.append(((out / "raw.csv").read_bytes(), (out / "summary.csv").read_bytes()))
    assert outs[0] == outs[1] == outs[2]
    assert "coverage fixedm-chisquare sigma2_1" in capsys.readouterr().out


def test_simulate_thread_env(tmp_path, monkeypatch):
    scn = tmp_path / "s.scn"
    scn.write_text(SMALL_SCENARIO)
    assert main(["simulate", "--scenario", str(scn), "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("LMM_FIXEDM_THREADS", "2")
    assert main(["simulate", "--scenario", str(scn), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "raw.csv").read_bytes() == (tmp_path / "b" / "raw.csv").read_bytes()


def test_simulate_unknown_key(tmp_path, capsys):
    scn = tmp_path / "s.scn"
    scn.write_text(SMALL_SCENARIO + "flavour = vanilla\n")
    assert main(["simulate", "--scenario", str(scn), "--out", str(tmp_path)]) == 1
    assert "flavour" in capsys.readouterr().err


def test_simulate_unknown_scenario_name(tmp_path, capsys):
    assert main(["simulate", "--scenario", "no_such_table", "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
