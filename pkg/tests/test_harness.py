import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from obree.config import validate_config
from obree.errors import ConfigError
from obree.harness import export_report, load_report, replay_manifest, run_experiment, summarize

TOY = {"model": "toy:exp_rate", "n": 20, "theta0": [1.0], "estimators": ["mle", "obree_mle"],
       "R": 40, "H": 20, "seed": 7}


@pytest.fixture(scope="module")
def toy_report():
    return run_experiment(validate_config(TOY))


def test_summary_trivial_cases():
    s = summarize(np.ones((5, 2)), [1.0, 1.0])
    assert np.all(s.bias == 0) and np.all(s.rmse == 0)
    s = summarize(np.array([[0.8], [1.2]]), [1.0])
    assert s.bias[0] == pytest.approx(0.0, abs=1e-15)
    assert s.variance[0] == pytest.approx(0.08, abs=1e-15)
    assert s.rmse[0] == pytest.approx(0.2, abs=1e-15)


def _two_pass(est, theta0):
    k = est.shape[0]
    mean = [sum(est[i, j] for i in range(k)) / k for j in range(est.shape[1])]
    var = [sum((est[i, j] - mean[j]) ** 2 for i in range(k)) / (k - 1) for j in range(est.shape[1])]
    mse = [sum((est[i, j] - theta0[j]) ** 2 for i in range(k)) / k for j in range(est.shape[1])]
    return np.array(mean) - theta0, np.array(var), np.sqrt(mse)


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=st.floats(-100, 100)))
def test_summary_matches_two_pass_reference(est):
    theta0 = np.linspace(-1, 1, est.shape[1])
    s = summarize(est, theta0)
    bias, var, rmse = _two_pass(est, theta0)
    assert np.allclose(s.bias, bias, rtol=0, atol=1e-12)
    assert np.allclose(s.variance, var, rtol=1e-12, atol=1e-12)
    assert np.allclose(s.rmse, rmse, rtol=1e-12, atol=1e-12)


def test_summary_excludes_failures():
    est = np.array([[1.0], [np.nan], [3.0], [5.0]])
    s = summarize(est, [0.0], usable=[True, True, True, False])
    assert s.n_used == 2 and s.convergence_failures == 2
    assert s.bias[0] == 2.0
    s = summarize(np.array([[np.nan]]), [0.0])
    assert s.n_used == 0 and np.isnan(s.bias[0])


def test_toy_experiment_shape(toy_report):
    assert toy_report.estimates["mle"].shape == (40, 1)
    assert set(toy_report.status["obree_mle"]) == {"ok"}
    assert np.all(toy_report.diagnostics["obree_mle"]["iterations"] > 0)
    assert np.all(toy_report.diagnostics["mle"]["iterations"] == 0)


def test_toy_bias_pattern():
    cfg = validate_config(dict(TOY, R=5000, H=100, seed=1))
    rep = run_experiment(cfg)
    mle, ob = rep.summary["mle"], rep.summary["obree_mle"]
    assert abs(mle.bias[0] - 1 / 19) <= 4 * mle.bias_se[0]
    assert abs(ob.bias[0]) <= 4 * ob.bias_se[0]


def test_thread_count_does_not_change_report(toy_report):
    assert run_experiment(validate_config(TOY), threads=4) == toy_report


def test_single_replication_bytes_repeat(tmp_path):
    cfg = validate_config(dict(TOY, R=1))
    a = export_report(run_experiment(cfg), tmp_path / "a")
    b = export_report(run_experiment(cfg), tmp_path / "b")
    for fa, fb in zip(a, b):
        assert open(fa, "rb").read() == open(fb, "rb").read()


def test_empty_estimators_rejected():
    with pytest.raises(ConfigError):
        run_experiment(dict(TOY, estimators=[]))


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_round_trip(toy_report, tmp_path, fmt):
    export_report(toy_report, tmp_path, fmt)
    assert load_report(tmp_path) == toy_report


def test_csv_layout(toy_report, tmp_path):
    export_report(toy_report, tmp_path)
    with open(tmp_path / "estimates.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == 40 * 2 * 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert set(manifest["files"]) == {"estimates.csv", "diagnostics.csv", "summary.csv"}


def test_replay_reproduces_summary(toy_report, tmp_path):
    export_report(toy_report, tmp_path / "orig")
    replay_manifest(tmp_path / "orig" / "manifest.json", tmp_path / "again", threads=3)
    for name in ("estimates.csv", "diagnostics.csv", "summary.csv", "manifest.json"):
        assert (tmp_path / "orig" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_json_has_no_nan_tokens(tmp_path):
    # separated logistic samples yield NaN rows; JSON must carry them as null
    cfg = validate_config({"model": "logistic", "n": 12, "p": 2, "beta": [3.0, -3.0], "estimators": ["mle"],
                           "R": 10, "seed": 3, "covariate_variance": 1.0})
    rep = run_experiment(cfg)
    assert "failed" in rep.status["mle"]
    export_report(rep, tmp_path, "json")
    text = (tmp_path / "report.json").read_text()
    assert "NaN" not in text and "null" in text
    assert load_report(tmp_path) == rep


def test_logistic_contaminated_experiment_runs():
    cfg = validate_config({"model": "logistic", "n": 100, "p": 2, "beta": [1.0, -1.0], "R": 3, "H": 10,
                           "estimators": ["mle", "robust", "obree_r"], "delta": 0.01, "tol": 0.05,
                           "contamination_rate": 0.04, "covariate_variance": 1.0})
    rep = run_experiment(cfg)
    assert rep.estimates["obree_r"].shape == (3, 2)
    assert rep.summary["robust"].n_used == 3


def test_unwritable_output(toy_report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_report(toy_report, os.path.join(blocker, "sub"))
