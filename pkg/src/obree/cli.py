"""Command-line entry point.

    obree experiment --config cfg.json --out dir/ [--seed S] [--threads T] [--format csv|json]
    obree fit --config cfg.json --data data.csv --estimator obree_mle
    obree oracle-check [--quick]

Exit status: 0 success, 2 configuration error, 3 runtime failure, 4 oracle
check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .config import MODEL_ESTIMATORS, parse_and_validate_config
from .core import SimulationBudget, ib_step, replica_estimates, solve_fixed_point, surrogate_pi
from .errors import ConfigError, EstimationError, SolverFailure, SurrogateFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ORACLE = 4

log = logging.getLogger("obree")


def _read_text(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _load_config(path, seed=None, for_fit=False):
    try:
        text = _read_text(path)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror or exc}") from exc
    if seed is not None:
        try:
            tree = json.loads(text)
        except json.JSONDecodeError:
            tree = None
        if isinstance(tree, dict):
            tree["seed"] = seed
            text = json.dumps(tree)
    return parse_and_validate_config(text, for_fit=for_fit)


def cmd_experiment(args):
    from .harness import export_report, run_experiment

    config = _load_config(args.config, args.seed)
    if args.threads < 0:
        raise ConfigError("--threads", "must be non-negative")
    step = max(1, config.R // 20)

    def progress(done, total):
        if done % step == 0 or done == total:
            log.info("replication %d/%d", done, total)

    report = run_experiment(config, threads=args.threads, progress=progress if args.verbose else None)
    files = export_report(report, args.out, args.format)
    for path in files:
        print(path)
    for est in report.estimators:
        s = report.summary[est]
        print(f"{est}: used {s.n_used}/{config.R}, excluded {s.convergence_failures}, "
              f"max |bias| {np.nanmax(np.abs(s.bias)):.4g}")
    return EXIT_OK


def read_data_csv(path):
    """Read ``y``, optional ``cluster`` and covariate columns (file order) from a CSV file."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError("--data", f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if "y" not in header:
        raise ConfigError("--data", f"{path} has no 'y' column")
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if not body:
        raise ConfigError("--data", f"{path} has no data rows")
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ConfigError("--data", f"{path} line {i}: expected {len(header)} fields, got {len(r)}")
    cols = {h: [r[j].strip() for r in body] for j, h in enumerate(header)}
    try:
        y = np.array([float(v) for v in cols["y"]])
        cov_names = [h for h in header if h not in ("y", "cluster")]
        X = np.column_stack([[float(v) for v in cols[h]] for h in cov_names]) if cov_names else None
    except ValueError as exc:
        raise ConfigError("--data", f"{path}: non-numeric value ({exc})") from exc
    cluster = None
    if "cluster" in cols:
        labels = {}
        cluster = np.array([labels.setdefault(v, len(labels)) for v in cols["cluster"]])
    return y, X, cluster, cov_names


def cmd_fit(args):
    from .glmm import ClusteredData, GlmmModel
    from .logistic import LogisticModel
    from .toy import ToyModel

    config = _load_config(args.config, args.seed, for_fit=True)
    family = config.family
    if args.estimator not in MODEL_ESTIMATORS[family]:
        raise ConfigError("--estimator", f"estimator {args.estimator!r} is incompatible with model {config.model!r}")
    y, X, cluster, names = read_data_csv(args.data)
    if family == "toy":
        model = ToyModel(config.toy_id, y.size)
        data, names = y, ["theta"]
    else:
        if X is None:
            raise ConfigError("--data", "no covariate columns")
        if not np.all((y == 0) | (y == 1)):
            raise ConfigError("--data", "column 'y' must be binary")
        if family == "logistic":
            if args.estimator == "robust":
                model = LogisticModel(X, "robust", 0.0, config.huber_c)
            elif args.estimator == "obree_r":
                model = LogisticModel(X, "robust", config.delta, config.huber_c)
            else:
                model = LogisticModel(X, "mle")
            data = y.astype(np.uint8)
        else:
            if cluster is None:
                raise ConfigError("--data", "a 'cluster' column is required for the glmm model")
            design = ClusteredData(X, cluster)
            base = config.initial_estimator if args.estimator == "obree_glmm" else args.estimator
            model = GlmmModel(design, base, config.ghq_nodes)
            data = y.astype(np.uint8)
            names = names + ["sigma2"]
    theta_tilde = model.estimate(data)
    out = dict(estimator=args.estimator, components=names, initial=[float(v) for v in theta_tilde])
    if args.estimator.startswith("obree"):
        budget = SimulationBudget(H=config.H, seed=config.seed, tol=config.tol, max_iter=config.max_iter,
                                  use_exact_pi=config.exact_pi, failure_policy=config.failure_policy,
                                  max_retries=config.max_retries)
        res = solve_fixed_point(model, theta_tilde, budget)
        out.update(estimate=[float(v) for v in res.theta_hat], converged=res.converged,
                   iterations=res.iterations, residual=res.scaled_residual, replica_failures=res.failures)
    else:
        out.update(estimate=out["initial"], converged=True, iterations=0)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def oracle_checks(quick=False):
    """Closed-form and Monte Carlo checks on the toy models; yields ``(name, passed, detail)``."""
    from .toy import ToyModel

    for toy_id, sizes, ratio in (("exp_rate", (5, 10, 50), lambda n: (n - 1) / n),
                                 ("unif_max", (4, 9, 100), lambda n: (n + 1) / n)):
        for n in sizes:
            model = ToyModel(toy_id, n)
            tilde = 1.2
            res = solve_fixed_point(model, [tilde], SimulationBudget(use_exact_pi=True))
            err = abs(res.theta_hat[0] - tilde * ratio(n))
            ok = res.converged and err <= 1e-8 and res.iterations <= 15
            yield f"fixed point {toy_id} n={n}", ok, f"error {err:.2e}, {res.iterations} iterations"

    t = ib_step([1.0], [1.0], ToyModel("exp_rate", 10).exact_pi([1.0]))[0]
    yield "map exp_rate n=10", abs(t - 8 / 9) <= 1e-15, f"T = {t:.15f}"
    t = ib_step([1.0], [0.9], ToyModel("unif_max", 9).exact_pi([1.0]))[0]
    yield "map unif_max n=9", abs(t - 1.0) <= 1e-15, f"T = {t:.15f}"

    H = 2000 if quick else 10000
    for toy_id, n, theta, target in (("exp_rate", 10, 1.0, 10 / 9), ("unif_max", 9, 2.0, 2.0 * 9 / 10)):
        model = ToyModel(toy_id, n)
        budget = SimulationBudget(H=H, seed=20240601)
        est, _ = replica_estimates(model, [theta], budget)
        mean = float(surrogate_pi(model, [theta], budget)[0])
        se = float(np.std(est[:, 0], ddof=1) / np.sqrt(H))
        z = (mean - target) / se
        yield f"simulated expectation {toy_id} n={n}", abs(z) <= 4.0, f"{mean:.5f} vs {target:.5f} ({z:+.2f} SE)"


def cmd_oracle_check(args):
    failed = 0
    for name, ok, detail in oracle_checks(args.quick):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    print(f"{failed} check(s) failed" if failed else "all checks passed")
    return EXIT_ORACLE if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="obree", description="Simulation-based bias reduction by iterative bootstrap.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("experiment", help="run a Monte Carlo experiment and export the report")
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the configured base seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads (0 = one per CPU)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("fit", help="fit one dataset from a CSV file")
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--data", required=True, help="CSV with a 'y' column, optional 'cluster', then covariates")
    p.add_argument("--estimator", required=True, help="estimator name, e.g. obree_mle")
    p.add_argument("--seed", type=int, help="override the configured base seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("oracle-check", help="closed-form and Monte Carlo self-checks on the toy models")
    p.add_argument("--quick", action="store_true", help="smaller Monte Carlo sizes")
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, SolverFailure, SurrogateFailure, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
