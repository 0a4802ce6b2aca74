import json
import subprocess
import sys

import numpy as np
import pytest

from obree.cli import main, read_data_csv
from obree.errors import ConfigError
from obree.logistic import generate_design, simulate_responses
from obree.rng import derive_stream

TOY = {"model": "toy:exp_rate", "n": 20, "theta0": [1.0], "estimators": ["mle", "obree_mle"],
       "R": 30, "H": 20, "seed": 7}


def _write(path, tree):
    path.write_text(json.dumps(tree))
    return str(path)


def test_experiment_writes_files(tmp_path, capsys):
    cfg = _write(tmp_path / "cfg.json", TOY)
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    out = capsys.readouterr().out
    assert "summary.csv" in out and "obree_mle" in out
    assert (tmp_path / "out" / "manifest.json").exists()


def test_seed_override_changes_results(tmp_path):
    cfg = _write(tmp_path / "cfg.json", TOY)
    main(["experiment", "--config", cfg, "--out", str(tmp_path / "a"), "--format", "json"])
    main(["experiment", "--config", cfg, "--out", str(tmp_path / "b"), "--format", "json", "--seed", "8"])
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert (a["seed"], b["seed"]) == (7, 8)
    assert a["files"]["report.json"] != b["files"]["report.json"]


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path / "cfg.json", {"model": "logistic", "scale": "desk", "estimators": ["obree_r"],
                                         "delta": 0.7})
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "delta" in capsys.readouterr().err
    cfg = _write(tmp_path / "cfg2.json", {"model": "glmm", "scale": "desk", "estimators": ["obree_r"]})
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert main(["experiment", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_unwritable_output_exit_3(tmp_path):
    cfg = _write(tmp_path / "cfg.json", dict(TOY, R=2))
    (tmp_path / "blocker").write_text("")
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "blocker" / "x")]) == 3


def test_oracle_check_passes(capsys):
    assert main(["oracle-check", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "all checks passed" in out


def _logistic_csv(path, n=120, seed=3):
    X = generate_design(n, 2, seed=seed, variance=1.0)
    y = simulate_responses(X, np.array([1.0, -1.0]), derive_stream(seed, [("rep", 1)]))
    lines = ["y,x1,x2"] + [f"{int(v)},{float(a)!r},{float(b)!r}" for v, (a, b) in zip(y, X)]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_fit_logistic(tmp_path, capsys):
    data = _logistic_csv(tmp_path / "d.csv")
    cfg = _write(tmp_path / "cfg.json", {"model": "logistic", "H": 20, "tol": 0.01, "seed": 2})
    assert main(["fit", "--config", cfg, "--data", data, "--estimator", "obree_mle"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["components"] == ["x1", "x2"] and len(out["estimate"]) == 2
    assert out["iterations"] >= 1
    assert main(["fit", "--config", cfg, "--data", data, "--estimator", "robust"]) == 0
    assert main(["fit", "--config", cfg, "--data", data, "--estimator", "ghq"]) == 2


def test_fit_glmm_needs_cluster_column(tmp_path):
    data = _logistic_csv(tmp_path / "d.csv")
    cfg = _write(tmp_path / "cfg.json", {"model": "glmm"})
    assert main(["fit", "--config", cfg, "--data", data, "--estimator", "joint_mode"]) == 2


def test_fit_glmm(tmp_path, capsys):
    rows = ["cluster,y,one,x"]
    rng = np.random.default_rng(0)
    for g in range(12):
        b = rng.normal()
        for _ in range(8):
            x = rng.normal()
            rows.append(f"g{g},{int(rng.uniform() < 1 / (1 + np.exp(-(b + x))))},1.0,{float(x)!r}")
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    cfg = _write(tmp_path / "cfg.json", {"model": "glmm"})
    assert main(["fit", "--config", cfg, "--data", str(tmp_path / "d.csv"), "--estimator", "ghq"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["components"] == ["one", "x", "sigma2"]


def test_read_data_csv_checks(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x1,x2\n1,2\n")
    with pytest.raises(ConfigError):
        read_data_csv(p)
    p.write_text("y,x1\n1,abc\n")
    with pytest.raises(ConfigError):
        read_data_csv(p)
    p.write_text("y,x1\n1,2,3\n")
    with pytest.raises(ConfigError):
        read_data_csv(p)
    p.write_text("cluster,y,x\nb,1,0.5\na,0,0.1\nb,1,0.2\n")
    y, X, cluster, names = read_data_csv(p)
    assert list(cluster) == [0, 1, 0] and names == ["x"] and X.shape == (3, 1)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "obree", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "oracle-check" in proc.stdout
