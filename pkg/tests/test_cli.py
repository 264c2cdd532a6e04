import csv
import json
import os

import numpy as np
import pytest

from unpredctl.cli import main, resolve_seed
from unpredctl import ExperimentConfig, ParameterError, backward_solve, diff_policies, scalar_benchmark


def one_step_scenario(**over):
    d = {
        "n": 1, "m": 1, "q": 1, "N": 1, "T": 1.0, "constant": True,
        "A_seq": [[1]], "B_seq": [[1]], "H": [[1]], "Q_seq": [[0]], "R_seq": [[1]],
        "lambda1": 1, "lambda2": 1, "lambda3_seq": 0.5, "x0": [2], "x_target": [0],
    }  # fmt: skip
    d.update(over)
    return d


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- exit codes --------------------------------------------------------------


def test_solve_prints_cost(capsys):
    assert main(["solve", "--N", "5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value_x0"] == pytest.approx(out["expected_cost"]["total"], rel=1e-9)


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = write_json(tmp_path / "bad.json", one_step_scenario(R_seq=[[0]]))
    assert main(["solve", "--config", bad]) == 2
    assert "R_0 not positive definite" in capsys.readouterr().err
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["experiment", "custom", "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_solver_degeneracy_exit_3(tmp_path, capsys):
    # passes validation, but the value recursion overflows two steps back
    path = write_json(tmp_path / "s.json", one_step_scenario(N=3, A_seq=[[1e200]]))
    assert main(["solve", "--config", path]) == 3
    assert "P_1" in capsys.readouterr().err


def test_over_constrained_exit_4():
    assert main(["solve", "--N", "15", "--input-bound", "0.5"]) == 4


def test_unknown_experiment_key(tmp_path):
    cfg = write_json(tmp_path / "e.json", {"preset": "fig1", "colour": "red"})
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path)]) == 2


# -- experiments -------------------------------------------------------------


def test_custom_one_step_total(tmp_path):
    cfg = write_json(tmp_path / "e.json", {"preset": "custom", "scenario": one_step_scenario(), "runs": 2})
    out = tmp_path / "out"
    assert main(["experiment", "--config", cfg, "--out", str(out)]) == 0
    (row,) = read_csv(out / "summary.csv")
    assert float(row["total"]) == pytest.approx(4.0)
    assert float(row["value_x0"]) == pytest.approx(4.0)


def test_fig3_table(tmp_path):
    out = tmp_path / "t"
    assert main(["experiment", "fig3_table1", "--runs", "20", "--out", str(out)]) == 0
    rows = read_csv(out / "table_prediction_errors.csv")
    assert [float(r["lambda3"]) for r in rows] == [0, 0.2, 0.5, 1]
    for r in rows:
        assert float(r["avg_error_q025"]) <= float(r["avg_error_mean"]) <= float(r["avg_error_q975"])


@pytest.mark.parametrize("mode", ["enumerate", "online"])
def test_fig4_two_summaries(tmp_path, mode):
    out = tmp_path / mode
    assert main(["experiment", "fig4", "--runs", "50", "--out", str(out), "--constrained-mode", mode]) == 0
    assert (out / "summary_base_unconstrained.csv").exists()
    assert (out / "summary_base_constrained.csv").exists()
    rows = {r["variant"]: r for r in read_csv(out / "summary.csv")}
    assert int(rows["constrained"]["bound_violations"]) == 0
    assert float(rows["constrained"]["max_abs_u"]) <= 4.0
    assert float(rows["unconstrained"]["max_abs_u"]) > 4.0
    traj = read_csv(out / "trajectories_base_constrained.csv")
    assert max(abs(float(r["u0"])) for r in traj if r["u0"]) <= 4.0


def test_reproducible_and_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["experiment", "fig2", "--runs", "5", "--seed", "11", "--out", str(d)]) == 0
    summaries = sorted(f for f in os.listdir(a) if f.startswith("summary"))
    assert summaries
    for f in summaries:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert sorted(manifest["files"]) == sorted(os.listdir(a))
    assert set(manifest["config"]) == set(ExperimentConfig.__dataclass_fields__)
    assert manifest["seeds"]["master_seed"] == 11


def test_seed_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv("UNPRED_SEED", raising=False)
    assert resolve_seed(None) == 0
    assert resolve_seed(None, 5) == 5
    monkeypatch.setenv("UNPRED_SEED", "9")
    assert resolve_seed(None, 5) == 9
    assert resolve_seed(3, 5) == 3
    cfg = write_json(tmp_path / "e.json", {"preset": "fig1", "master_seed": 1, "runs": 2})
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seeds"]["master_seed"] == 9
    monkeypatch.setenv("UNPRED_SEED", "x")
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_rollout_and_attack_commands(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["rollout", "--N", "6", "--runs", "3", "--out", str(out), "--dump-policy", str(tmp_path / "p.json")]) == 0
    assert len(read_csv(out / "trajectories.csv")) == 3 * 7
    assert json.loads((tmp_path / "p.json").read_text())["kind"] == "schedule"
    assert main(["attack", "--N", "6", "--runs", "3", "--out", str(out)]) == 0
    assert len(read_csv(out / "predictions.csv")) == 3 * 5
    assert json.loads((out / "summary.json").read_text())["seeds"]["runs"] == 3


def test_config_round_trip():
    cfg = ExperimentConfig(preset="fig1", sweep=[("lambda1", [1, 2])], runs=3)
    assert ExperimentConfig.from_dict(cfg.as_dict()).as_dict() == cfg.as_dict()
    with pytest.raises(ParameterError):
        ExperimentConfig(preset="fig9")


# -- policy diff -------------------------------------------------------------


def test_diff_identical(tmp_path, capsys):
    p = write_json(tmp_path / "a.json", one_step_scenario(N=5, lambda3_seq=0.5))
    assert main(["diff", p, p]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 5
    for r in rows:
        assert float(r["dG"]) == float(r["dM"]) == float(r["dP"]) == float(r["dsigma2"]) == 0.0
        assert r["flagged"] == "0"


def test_diff_lambda3_scaled(tmp_path):
    a = write_json(tmp_path / "a.json", one_step_scenario(N=5, lambda3_seq=0.5))
    b = write_json(tmp_path / "b.json", one_step_scenario(N=5, lambda3_seq=2.0))
    out = tmp_path / "d.csv"
    assert main(["diff", a, b, "--out", str(out)]) == 0
    for r in read_csv(out):
        assert float(r["dG"]) == float(r["dM"]) == float(r["dP"]) == 0.0
        assert float(r["sigma2_ratio"]) == pytest.approx(2.0, rel=1e-14)
        assert r["flagged"] == "1"


def test_diff_lambda3_zero_vs_positive(tmp_path):
    a = write_json(tmp_path / "a.json", one_step_scenario(N=4, lambda3_seq=0.0))
    b = write_json(tmp_path / "b.json", one_step_scenario(N=4, lambda3_seq=0.5))
    out = tmp_path / "d.csv"
    assert main(["diff", a, b, "--out", str(out)]) == 0
    for r in read_csv(out):
        assert float(r["sigma2_a"]) == 0.0 and float(r["sigma2_b"]) > 0


def test_diff_dumped_policy(tmp_path, capsys):
    dump = str(tmp_path / "p.json")
    assert main(["solve", "--N", "8", "--dump-policy", dump]) == 0
    capsys.readouterr()
    assert main(["diff", dump, dump]) == 0
    assert "flagged" in capsys.readouterr().out


def test_diff_shape_mismatch():
    with pytest.raises(Exception):
        diff_policies(backward_solve(scalar_benchmark(N=3)), backward_solve(scalar_benchmark(N=4)))
    assert np.isnan(diff_policies(*[backward_solve(scalar_benchmark(N=2, lambda3=0))] * 2)[0]["sigma2_ratio"][0])
