"""Monte Carlo experiments: run, summarize, export and replay.

Replication ``r`` (1-based) simulates its dataset from the stream tagged
``(rep=r)`` and its bias-correction replicas from ``(rep=r, sim=h)``, so every
number in a report is a function of the configuration alone.  Replications
may run on several threads; results are collected in replication order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .config import config_to_dict, validate_config
from .core import SimulationBudget, solve_fixed_point
from .errors import EstimationError, SolverFailure
from .glmm import GlmmModel, GlmmParams, clustered_design, simulate_glmm
from .logistic import LogisticModel, contaminate, generate_design, simulate_responses
from .rng import derive_stream
from .toy import ToyModel

__all__ = [
    "SummaryStats",
    "ExperimentReport",
    "QUANTILE_LEVELS",
    "summarize",
    "run_experiment",
    "export_report",
    "load_report",
    "replay_manifest",
]

log = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.05, 0.25, 0.50, 0.75, 0.95)
OBREE_ESTIMATORS = ("obree_mle", "obree_r", "obree_glmm")
FORMAT_VERSION = 1


@dataclass
class SummaryStats:
    """Per-component summaries of one estimator over the usable replications.

    ``variance`` uses the ``1/(n_used - 1)`` divisor and is NaN when fewer
    than two replications are usable.  ``convergence_failures`` counts the
    replications excluded (estimation failure or non-convergence) and
    ``replica_failures`` those in which at least one simulated replica failed.
    """

    n_used: int
    bias: np.ndarray
    bias_se: np.ndarray
    variance: np.ndarray
    rmse: np.ndarray
    quantiles: np.ndarray
    convergence_failures: int = 0
    replica_failures: int = 0

    def __eq__(self, other):
        if not isinstance(other, SummaryStats):
            return NotImplemented
        arrays = ("bias", "bias_se", "variance", "rmse", "quantiles")
        return (
            self.n_used == other.n_used
            and self.convergence_failures == other.convergence_failures
            and self.replica_failures == other.replica_failures
            and all(np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True) for a in arrays)
        )


def summarize(estimates, theta0, usable=None, replica_failures=0):
    """Bias, variance, RMSE and type-7 quantiles of an ``R x p`` estimate matrix.

    Rows that are not finite, or are masked out by ``usable``, are excluded and
    counted as convergence failures.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    R, p = est.shape
    if R < 1:
        raise ValueError("need at least one replication")
    if theta0.size != p:
        raise ValueError(f"theta0 has length {theta0.size}, estimates have {p} columns")
    keep = np.all(np.isfinite(est), axis=1)
    if usable is not None:
        keep &= np.asarray(usable, dtype=bool)
    good = est[keep]
    k = good.shape[0]
    nan = np.full(p, np.nan)
    if k == 0:
        return SummaryStats(0, nan, nan.copy(), nan.copy(), nan.copy(), np.full((len(QUANTILE_LEVELS), p), np.nan),
                            R, int(replica_failures))
    err = good - theta0
    bias = err.mean(axis=0)
    if k > 1:
        variance = np.sum((good - good.mean(axis=0)) ** 2, axis=0) / (k - 1)
        bias_se = np.sqrt(variance / k)
    else:
        variance, bias_se = nan.copy(), nan.copy()
    rmse = np.sqrt(np.mean(err * err, axis=0))
    quantiles = np.quantile(good, QUANTILE_LEVELS, axis=0, method="linear")
    return SummaryStats(k, bias, bias_se, variance, rmse, quantiles, R - k, int(replica_failures))


@dataclass
class ExperimentReport:
    """Every per-replication estimate and diagnostic plus the summaries.

    ``estimates[e]`` is ``R x p`` with NaN rows for failures; ``status[e]``
    holds ``"ok"``, ``"failed"`` or ``"nonconverged"`` per replication;
    ``diagnostics[e]`` holds per-replication ``iterations``, ``residual``
    (last displacement over ``1 + |theta|_inf``), ``replica_failures`` and
    ``clamped`` arrays.
    """

    config: object
    estimates: dict
    status: dict
    diagnostics: dict
    summary: dict = field(default_factory=dict)

    @property
    def estimators(self):
        return list(self.config.estimators)

    @property
    def components(self):
        return self.config.component_names

    def __eq__(self, other):
        if not isinstance(other, ExperimentReport):
            return NotImplemented
        if config_to_dict(self.config) != config_to_dict(other.config):
            return False
        for e in self.estimators:
            if not np.array_equal(self.estimates[e], other.estimates[e], equal_nan=True):
                return False
            if list(self.status[e]) != list(other.status[e]):
                return False
            for key, arr in self.diagnostics[e].items():
                if not np.array_equal(arr, other.diagnostics[e][key], equal_nan=True):
                    return False
            if self.summary.get(e) != other.summary.get(e):
                return False
        return True


# ---------------------------------------------------------------- execution


class _Context:
    """Everything shared by the replications of one experiment."""

    def __init__(self, config):
        self.config = config
        self.theta0 = np.asarray(config.theta_true, dtype=float)
        self.budget = SimulationBudget(
            H=config.H, seed=config.seed, tol=config.tol, max_iter=config.max_iter,
            use_exact_pi=config.exact_pi, failure_policy=config.failure_policy, max_retries=config.max_retries,
        )
        family = config.family
        self.models = {}
        if family == "toy":
            self.models["mle"] = ToyModel(config.toy_id, config.n)
        elif family == "logistic":
            self.X = generate_design(config.n, config.p, config.covariate_mean, seed=config.seed,
                                     variance=config.covariate_variance)
            self.mu0 = expit(self.X @ self.theta0)
            self.models["mle"] = LogisticModel(self.X, "mle")
            if "robust" in config.estimators:
                self.models["robust"] = LogisticModel(self.X, "robust", 0.0, config.huber_c)
            if "obree_r" in config.estimators:
                self.models["obree_r"] = LogisticModel(self.X, "robust", config.delta, config.huber_c)
        else:
            self.design = clustered_design(config.m, config.cluster_size, config.q, config.covariate_mean,
                                           config.covariate_variance, seed=config.seed)
            self.params0 = GlmmParams(config.beta, config.sigma2)
            self.models["joint_mode"] = GlmmModel(self.design, "joint_mode", config.ghq_nodes)
            if "ghq" in config.estimators or config.initial_estimator == "ghq":
                self.models["ghq"] = GlmmModel(self.design, "ghq", config.ghq_nodes)

    def simulate(self, r):
        stream = derive_stream(self.config.seed, [("rep", r)])
        family = self.config.family
        if family == "toy":
            return self.models["mle"].simulate(self.theta0, stream)
        if family == "logistic":
            y = simulate_responses(self.X, self.theta0, stream)
            rate = self.config.contamination_rate
            if rate > 0:
                mu = self.mu0
                if self.config.contamination_ranking == "fitted":
                    try:
                        mu = expit(self.X @ self.models["mle"].estimate(y))
                    except EstimationError:
                        pass
                y = contaminate(y, mu, rate)
            return y
        return simulate_glmm(self.design, self.params0, stream).y

    def initial_model(self, estimator):
        family = self.config.family
        if estimator in ("mle", "obree_mle"):
            return self.models["mle"]
        if estimator == "obree_r":
            return self.models["obree_r"]
        if estimator == "robust":
            return self.models["robust"]
        if estimator == "obree_glmm":
            return self.models[self.config.initial_estimator]
        if family == "glmm":
            return self.models[estimator]
        raise KeyError(estimator)


def _blank_record(p):
    return dict(estimate=np.full(p, np.nan), status="failed", iterations=0, residual=float("nan"),
                replica_failures=0, clamped=False)


def _run_replication(ctx, r):
    config = ctx.config
    p = ctx.theta0.size
    data = ctx.simulate(r)
    initial = {}

    def initial_estimate(model):
        key = id(model)
        if key not in initial:
            try:
                initial[key] = np.asarray(model.estimate(data), dtype=float)
            except EstimationError:
                initial[key] = None
        return initial[key]

    out = {}
    for est in config.estimators:
        rec = _blank_record(p)
        model = ctx.initial_model(est)
        theta_tilde = initial_estimate(model)
        if theta_tilde is None:
            out[est] = rec
            continue
        if est not in OBREE_ESTIMATORS:
            rec.update(estimate=theta_tilde, status="ok")
            out[est] = rec
            continue
        try:
            res = solve_fixed_point(model, theta_tilde, ctx.budget, rep_tag=r)
        except SolverFailure as exc:
            partial = exc.result
            if partial is not None:
                rec.update(iterations=partial.iterations, replica_failures=partial.failures, clamped=partial.clamped)
            out[est] = rec
            continue
        rec.update(
            estimate=np.asarray(res.theta_hat, dtype=float),
            status="ok" if res.converged else "nonconverged",
            iterations=res.iterations,
            residual=res.scaled_residual,
            replica_failures=res.failures,
            clamped=res.clamped,
        )
        out[est] = rec
    return out


def run_experiment(config, threads=1, progress=None):
    """Run every replication of ``config`` and return an ``ExperimentReport``.

    ``threads`` is the number of worker threads (0 picks the CPU count); the
    report does not depend on it.  ``progress(done, total)`` is called after
    each replication when given.
    """
    if isinstance(config, dict):
        config = validate_config(config)
    ctx = _Context(config)
    R = config.R
    reps = range(1, R + 1)
    workers = (os.cpu_count() or 1) if threads == 0 else int(threads)
    if workers < 1:
        raise ValueError("threads must be non-negative")
    results = []
    if workers == 1:
        for r in reps:
            results.append(_run_replication(ctx, r))
            if progress:
                progress(len(results), R)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(lambda r: _run_replication(ctx, r), reps):
                results.append(res)
                if progress:
                    progress(len(results), R)

    estimates, status, diagnostics, summary = {}, {}, {}, {}
    for est in config.estimators:
        rows = [res[est] for res in results]
        estimates[est] = np.vstack([row["estimate"] for row in rows])
        status[est] = [row["status"] for row in rows]
        diagnostics[est] = dict(
            iterations=np.array([row["iterations"] for row in rows], dtype=int),
            residual=np.array([row["residual"] for row in rows], dtype=float),
            replica_failures=np.array([row["replica_failures"] for row in rows], dtype=int),
            clamped=np.array([row["clamped"] for row in rows], dtype=bool),
        )
    report = ExperimentReport(config, estimates, status, diagnostics)
    _fill_summary(report)
    return report


def _fill_summary(report):
    theta0 = np.asarray(report.config.theta_true, dtype=float)
    for est in report.estimators:
        usable = np.array([s == "ok" for s in report.status[est]])
        hit = int(np.sum(report.diagnostics[est]["replica_failures"] > 0))
        report.summary[est] = summarize(report.estimates[est], theta0, usable, hit)


# ---------------------------------------------------------------- export


def _fmt(x):
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _json_num(x):
    x = float(x)
    return None if math.isnan(x) else x


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


_EST_HEADER = ["setting", "estimator", "replication", "component", "value"]
_DIAG_HEADER = ["setting", "estimator", "replication", "status", "iterations", "residual", "replica_failures",
                "clamped"]
_SUMMARY_HEADER = ["setting", "estimator", "component", "n_used", "bias", "bias_se", "variance", "rmse",
                   "q05", "q25", "q50", "q75", "q95", "convergence_failures", "replica_failures"]


def _estimate_rows(report):
    label = report.config.setting_label
    comps = report.components
    for est in report.estimators:
        for r, row in enumerate(report.estimates[est], start=1):
            for name, value in zip(comps, row):
                yield [label, est, r, name, _fmt(value)]


def _diagnostic_rows(report):
    label = report.config.setting_label
    for est in report.estimators:
        d = report.diagnostics[est]
        for i, st in enumerate(report.status[est]):
            yield [label, est, i + 1, st, int(d["iterations"][i]), _fmt(d["residual"][i]),
                   int(d["replica_failures"][i]), int(bool(d["clamped"][i]))]


def _summary_rows(report):
    label = report.config.setting_label
    for est in report.estimators:
        s = report.summary[est]
        for j, name in enumerate(report.components):
            yield [label, est, name, s.n_used, _fmt(s.bias[j]), _fmt(s.bias_se[j]), _fmt(s.variance[j]),
                   _fmt(s.rmse[j])] + [_fmt(q) for q in s.quantiles[:, j]] + [s.convergence_failures,
                                                                              s.replica_failures]


def _write(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _dumps(tree):
    return json.dumps(tree, indent=2, sort_keys=True, allow_nan=False) + "\n"


def export_report(report, path, format="csv"):
    """Write the report under directory ``path``; returns the written file paths.

    ``csv`` writes ``estimates.csv`` (long format), ``diagnostics.csv`` and
    ``summary.csv``; ``json`` writes one ``report.json``.  Both add
    ``manifest.json`` with the full configuration and file digests, which is
    enough to replay the run.  Output bytes depend only on the report.
    """
    if format not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    files = {}
    if format == "csv":
        texts = {
            "estimates.csv": _csv_text(_EST_HEADER, _estimate_rows(report)),
            "diagnostics.csv": _csv_text(_DIAG_HEADER, _diagnostic_rows(report)),
            "summary.csv": _csv_text(_SUMMARY_HEADER, _summary_rows(report)),
        }
    else:
        texts = {"report.json": _dumps(_report_tree(report))}
    for name, text in texts.items():
        files[name] = _write(os.path.join(path, name), text)
    from . import __version__

    manifest = dict(format_version=FORMAT_VERSION, format=format, package_version=__version__,
                    seed=report.config.seed, config=config_to_dict(report.config), files=files)
    _write(os.path.join(path, "manifest.json"), _dumps(manifest))
    return [os.path.join(path, name) for name in list(texts) + ["manifest.json"]]


def _report_tree(report):
    tree = dict(setting=report.config.setting_label, components=report.components, estimators={})
    for est in report.estimators:
        d = report.diagnostics[est]
        s = report.summary[est]
        tree["estimators"][est] = dict(
            estimates=[[_json_num(v) for v in row] for row in report.estimates[est]],
            status=list(report.status[est]),
            iterations=[int(v) for v in d["iterations"]],
            residual=[_json_num(v) for v in d["residual"]],
            replica_failures=[int(v) for v in d["replica_failures"]],
            clamped=[bool(v) for v in d["clamped"]],
            summary=dict(
                n_used=s.n_used, convergence_failures=s.convergence_failures, replica_failures=s.replica_failures,
                bias=[_json_num(v) for v in s.bias], bias_se=[_json_num(v) for v in s.bias_se],
                variance=[_json_num(v) for v in s.variance], rmse=[_json_num(v) for v in s.rmse],
                quantiles=[[_json_num(v) for v in row] for row in s.quantiles],
            ),
        )
    return tree


def _read(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _num(s):
    return float("nan") if s is None else float(s)


def load_report(path):
    """Re-read an exported report directory into an ``ExperimentReport``."""
    manifest = json.loads(_read(os.path.join(path, "manifest.json")))
    config = validate_config(manifest["config"])
    comps = config.component_names
    R, p = config.R, len(comps)
    estimates, status, diagnostics, summary = {}, {}, {}, {}
    if manifest["format"] == "json":
        tree = json.loads(_read(os.path.join(path, "report.json")))
        for est, node in tree["estimators"].items():
            estimates[est] = np.array([[_num(v) for v in row] for row in node["estimates"]], dtype=float)
            status[est] = list(node["status"])
            diagnostics[est] = dict(
                iterations=np.array(node["iterations"], dtype=int),
                residual=np.array([_num(v) for v in node["residual"]], dtype=float),
                replica_failures=np.array(node["replica_failures"], dtype=int),
                clamped=np.array(node["clamped"], dtype=bool),
            )
            s = node["summary"]
            summary[est] = SummaryStats(
                s["n_used"], np.array([_num(v) for v in s["bias"]]), np.array([_num(v) for v in s["bias_se"]]),
                np.array([_num(v) for v in s["variance"]]), np.array([_num(v) for v in s["rmse"]]),
                np.array([[_num(v) for v in row] for row in s["quantiles"]]).reshape(len(QUANTILE_LEVELS), p),
                s["convergence_failures"], s["replica_failures"],
            )
        return ExperimentReport(config, estimates, status, diagnostics, summary)

    index = {c: j for j, c in enumerate(comps)}
    for est in config.estimators:
        estimates[est] = np.full((R, p), np.nan)
        status[est] = ["failed"] * R
        diagnostics[est] = dict(iterations=np.zeros(R, int), residual=np.full(R, np.nan),
                                replica_failures=np.zeros(R, int), clamped=np.zeros(R, bool))
    for row in csv.DictReader(io.StringIO(_read(os.path.join(path, "estimates.csv")))):
        estimates[row["estimator"]][int(row["replication"]) - 1, index[row["component"]]] = float(row["value"])
    for row in csv.DictReader(io.StringIO(_read(os.path.join(path, "diagnostics.csv")))):
        est, i = row["estimator"], int(row["replication"]) - 1
        status[est][i] = row["status"]
        d = diagnostics[est]
        d["iterations"][i] = int(row["iterations"])
        d["residual"][i] = float(row["residual"])
        d["replica_failures"][i] = int(row["replica_failures"])
        d["clamped"][i] = bool(int(row["clamped"]))
    rows = {}
    for row in csv.DictReader(io.StringIO(_read(os.path.join(path, "summary.csv")))):
        rows.setdefault(row["estimator"], []).append(row)
    for est, block in rows.items():
        block.sort(key=lambda row: index[row["component"]])
        col = lambda key: np.array([float(row[key]) for row in block])  # noqa: E731
        summary[est] = SummaryStats(
            int(block[0]["n_used"]), col("bias"), col("bias_se"), col("variance"), col("rmse"),
            np.vstack([col(k) for k in ("q05", "q25", "q50", "q75", "q95")]),
            int(block[0]["convergence_failures"]), int(block[0]["replica_failures"]),
        )
    return ExperimentReport(config, estimates, status, diagnostics, summary)


def replay_manifest(manifest_path, out_dir, threads=1):
    """Re-run the experiment recorded in a manifest and export it to ``out_dir``."""
    manifest = json.loads(_read(manifest_path))
    config = validate_config(manifest["config"])
    report = run_experiment(config, threads=threads)
    return export_report(report, out_dir, manifest["format"])
