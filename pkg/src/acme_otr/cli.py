"""``acme-otr`` command line: evaluate policies on CSV data, illustrate discrete models, run simulations."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analytic import DiscreteModel, ModelError, acme_value, marginal_median_value, optimal_policies
from .core import Dataset, RecordedTreatment, ThresholdRule, TreatAll, TreatNone
from .estimator import LEARN_MEAN_OPTIMAL, LEARN_MEDIAN_OPTIMAL, aggregate_rotations, crossfit_nuisances
from .nuisance import FitConfig, KernelSpec
from .simulation import (
    DEFAULT_ALPHAS,
    DEFAULT_NS,
    LognormalDgp,
    coverage_experiment,
    rmse_experiment,
    write_report_files,
)

SCHEMA_VERSION = 1
STANDARD_POLICIES = ("observational", "median-optimal", "treat-all", "treat-none", "mean-optimal")
MISSING = {"", "na", "nan", "null", "none"}


class CsvSchemaError(ValueError):
    pass


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def read_dataset_csv(path: str, covariates: Sequence[str], treatment: str, outcome: str):
    """Parse a CSV into a :class:`Dataset`.

    Rows with a missing outcome are dropped and counted; any other malformed
    value raises :class:`CsvSchemaError` naming the file line.
    Returns ``(dataset, n_excluded)``.
    """
    if not covariates:
        raise CsvSchemaError("at least one covariate column is required")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CsvSchemaError(f"{path}: empty file or missing header row")
        missing = [c for c in (*covariates, treatment, outcome) if c not in reader.fieldnames]
        if missing:
            raise CsvSchemaError(f"{path}: columns not found in header: {', '.join(missing)}")
        X, A, Y = [], [], []
        excluded = 0
        for line, row in enumerate(reader, start=2):
            raw_y = (row[outcome] or "").strip()
            if raw_y.lower() in MISSING:
                excluded += 1
                continue
            y = _parse_float(raw_y, line, outcome)
            a = _parse_float(row[treatment], line, treatment)
            if a not in (0.0, 1.0):
                raise CsvSchemaError(f"line {line}: treatment column {treatment!r} must be 0 or 1, got {row[treatment]!r}")
            X.append([_parse_float(row[c], line, c) for c in covariates])
            A.append(int(a))
            Y.append(y)
    if not Y:
        raise CsvSchemaError(f"{path}: no usable rows")
    return Dataset(np.array(X, dtype=float), np.array(A), np.array(Y)), excluded


def _parse_float(text, line: int, column: str) -> float:
    try:
        v = float((text or "").strip())
    except ValueError:
        raise CsvSchemaError(f"line {line}: column {column!r} is not numeric: {text!r}") from None
    if not math.isfinite(v):
        raise CsvSchemaError(f"line {line}: column {column!r} is not finite: {text!r}")
    return v


def write_dataset_csv(data: Dataset, path: str, covariates: Optional[Sequence[str]] = None,
                      treatment: str = "a", outcome: str = "y") -> None:
    """Write with shortest round-trip float formatting, so reading back is lossless."""
    names = list(covariates) if covariates else [f"x{j + 1}" for j in range(data.d)]
    lines = [",".join([*names, treatment, outcome])]
    for x, a, y in zip(data.X, data.a, data.y):
        lines.append(",".join([*(repr(float(v)) for v in x), str(int(a)), repr(float(y))]))
    atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _fit_config(args) -> FitConfig:
    return FitConfig(
        median_method=args.median_method,
        median_k=args.median_k,
        propensity=args.propensity if args.propensity is not None else "logistic",
        density_method=args.density_method,
        density_k=args.density_k,
        density_bandwidth_x=args.density_bandwidth_x,
        kernel=KernelSpec(args.bandwidth),
        mean_method=args.mean_method,
        mean_k=args.mean_k,
    )


def _policy_requests(names: Sequence[str], threshold: Optional[str], covariates: Sequence[str]):
    requests = {}
    for name in names:
        if name == "observational":
            requests[name] = RecordedTreatment()
        elif name == "median-optimal":
            requests[name] = LEARN_MEDIAN_OPTIMAL
        elif name == "mean-optimal":
            requests[name] = LEARN_MEAN_OPTIMAL
        elif name == "treat-all":
            requests[name] = TreatAll()
        elif name == "treat-none":
            requests[name] = TreatNone()
        elif name != "threshold":
            raise SystemExit(f"unknown policy {name!r}")
    if threshold:
        col, _, value = threshold.partition(":")
        if col not in covariates or not value:
            raise SystemExit("--threshold expects COLUMN:VALUE with COLUMN among the covariates")
        key = f"threshold:{col}>{value}"
        requests[key] = ThresholdRule(list(covariates).index(col), float(value), name=key)
    elif "threshold" in names:
        raise SystemExit("policy 'threshold' needs --threshold COLUMN:VALUE")
    return requests


def cmd_evaluate(args) -> int:
    covariates = [c.strip() for c in args.covariates.split(",") if c.strip()]
    try:
        data, excluded = read_dataset_csv(args.data, covariates, args.treatment, args.outcome)
    except CsvSchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for a in (0, 1):
        if not np.any(data.a == a):
            print(f"error: no rows with treatment {a}; both arms are required", file=sys.stderr)
            return 2
    names = STANDARD_POLICIES if args.policies == "all" else [p.strip() for p in args.policies.split(",")]
    requests = _policy_requests(names, args.threshold, covariates)
    cfg = _fit_config(args)
    try:
        rotations = crossfit_nuisances(data, cfg, seed=args.seed, with_means="mean-optimal" in requests)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    estimates = {}
    for name, req in requests.items():
        dr = aggregate_rotations(data, rotations, req, "doubly-robust")
        pi = aggregate_rotations(data, rotations, req, "plug-in")
        dr.policy = pi.policy = name
        estimates[name] = {"doubly_robust": dr.to_dict(), "plug_in": pi.to_dict()}

    contrast = np.empty(data.n)
    for rot in rotations:
        Xe = data.X[rot.evaluate]
        contrast[rot.evaluate] = rot.nuisances.median_at(1, Xe) - rot.nuisances.median_at(0, Xe)
    counts, edges = np.histogram(contrast, bins=args.bins)
    hist_path = args.hist_out or os.path.splitext(args.out)[0] + "_median_contrast_hist.csv"
    hist = ["bin_left,bin_right,count"] + [f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(c)}" for i, c in enumerate(counts)]
    atomic_write(hist_path, "\n".join(hist) + "\n")

    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "evaluate",
        "version": __version__,
        "config": {
            "data": os.path.abspath(args.data), "covariates": covariates, "treatment": args.treatment,
            "outcome": args.outcome, "policies": list(requests), "fold_seed": args.seed,
            "fit": cfg.to_dict(), "bins": args.bins,
        },
        "n_used": data.n,
        "n_excluded_missing_outcome": excluded,
        "folds": [{"train": rot.train.size, "density": rot.density.size, "evaluate": rot.evaluate.size}
                  for rot in rotations],
        "estimates": estimates,
        "median_contrast_histogram": os.path.abspath(hist_path),
    }
    atomic_write(args.out, json.dumps(report, indent=2))
    return 0


# ---------------------------------------------------------------------------
# illustrate
# ---------------------------------------------------------------------------


def load_model(spec: str) -> DiscreteModel:
    """Load a model JSON file, or a bundled model by name (``case1``, ``case2``)."""
    if not os.path.exists(spec) and spec in ("case1", "case2"):
        text = resources.files("acme_otr").joinpath(f"data/{spec}.json").read_text()
    else:
        with open(spec) as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError("", f"invalid JSON: {exc}") from None
    return DiscreteModel.from_json(doc)


def illustrate(model: DiscreteModel) -> dict:
    table = optimal_policies(model)
    medians = [{"label": x, "arm": a, "median": model.median(x, a), "mean": model.dist(x, a).mean}
               for x in model.labels for a in (0, 1)]
    values = []
    for kind in ("mean", "mme", "acme"):
        d = getattr(table, kind)
        values.append({"policy": kind.upper(), "decisions": list(d),
                       "acme_value": acme_value(model, d), "marginal_median": marginal_median_value(model, d)})
    return {"labels": list(model.labels), "decisions": table.rows(),
            "mme_maximizers": [list(m) for m in table.mme_maximizers],
            "conditional": medians, "values": values}


def cmd_illustrate(args) -> int:
    try:
        model = load_model(args.model)
    except (ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = illustrate(model)
    rows = ["record,policy,label,arm,value,indifferent"]
    for r in result["decisions"]:
        rows.append(f"decision,{r['policy']},{r['label']},,{r['treat']},{str(r['indifferent']).lower()}")
    for r in result["conditional"]:
        rows.append(f"conditional_median,,{r['label']},{r['arm']},{r['median']!r},")
    for r in result["values"]:
        rows.append(f"acme_value,{r['policy']},,,{r['acme_value']!r},")
        rows.append(f"marginal_median,{r['policy']},,,{r['marginal_median']!r},")
    atomic_write(args.out, "\n".join(rows) + "\n")
    result.update({"schema_version": SCHEMA_VERSION, "command": "illustrate",
                   "config": {"model": args.model, "resolved_model": model.to_json()}})
    atomic_write(os.path.splitext(args.out)[0] + ".json", json.dumps(result, indent=2))
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

DEFAULT_SIM_CONFIG = {
    "ns": list(DEFAULT_NS),
    "alphas": list(DEFAULT_ALPHAS),
    "reps": 1000,
    "seed": 0,
    "granularity": "replication",
    "beta": [0.2] * 5,
    "scale": 0.25,
    "coverage": {"n": 5000, "reps": 1000, "policies": ["threshold", "median-optimal"]},
    "assertions": {
        "plugin_monotone": True,
        "dr_beats_plugin_alphas": [0.3, 0.4, 0.5],
        "coverage_band": [0.93, 0.97],
        "min_reps": 100,
    },
}


def resolve_sim_config(user: Optional[dict]) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_SIM_CONFIG))
    for key, value in (user or {}).items():
        if key not in cfg:
            raise ValueError(f"unknown simulation config key {key!r}")
        if isinstance(cfg[key], dict) and isinstance(value, dict):
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise ValueError(f"unknown keys under {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    if not cfg["ns"] or not cfg["alphas"]:
        raise ValueError("ns and alphas must be nonempty")
    return cfg


def check_assertions(report, coverage: list, cfg: dict) -> list[dict]:
    rules = cfg["assertions"]
    if cfg["reps"] < rules["min_reps"]:
        return [{"name": "all", "passed": True, "skipped": True,
                 "detail": f"reps={cfg['reps']} below min_reps={rules['min_reps']}"}]
    out = []
    alphas = sorted(float(a) for a in cfg["alphas"])
    for n in cfg["ns"]:
        if rules["plugin_monotone"]:
            for lo, hi in zip(alphas, alphas[1:]):
                a, b = report.cell(n, lo, "plug-in"), report.cell(n, hi, "plug-in")
                slack = 2 * math.hypot(a["mc_se"], b["mc_se"])
                out.append({"name": f"plugin_monotone n={n} alpha {lo}->{hi}",
                            "passed": b["rmse"] <= a["rmse"] + slack,
                            "detail": f"{a['rmse']:.5g} -> {b['rmse']:.5g} (slack {slack:.3g})"})
        for alpha in rules["dr_beats_plugin_alphas"]:
            if float(alpha) not in alphas:
                continue
            dr, pi = report.rmse(n, float(alpha), "doubly-robust"), report.rmse(n, float(alpha), "plug-in")
            out.append({"name": f"dr_beats_plugin n={n} alpha={alpha}", "passed": dr < pi,
                        "detail": f"dr {dr:.5g} vs plug-in {pi:.5g}"})
    lo, hi = rules["coverage_band"]
    for cov in coverage:
        out.append({"name": f"coverage {cov['policy']}", "passed": lo <= cov["coverage"] <= hi,
                    "detail": f"{cov['coverage']:.4f} not in [{lo}, {hi}]" if not lo <= cov["coverage"] <= hi
                    else f"{cov['coverage']:.4f}"})
    return out


def cmd_simulate(args) -> int:
    user = None
    if args.config:
        with open(args.config) as fh:
            user = json.load(fh)
    if args.reps is not None:
        user = dict(user or {}, reps=args.reps)
    try:
        cfg = resolve_sim_config(user)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    dgp = LognormalDgp(tuple(cfg["beta"]), cfg["scale"])
    report = rmse_experiment(dgp, ThresholdRule(0), cfg["ns"], cfg["alphas"], cfg["reps"],
                             cfg["seed"], cfg["granularity"])
    report.config = cfg
    write_report_files(report, args.out_dir)

    coverage = []
    cov_cfg = cfg.get("coverage")
    # coverage is skipped in smoke runs, where no assertion would use it
    if cov_cfg and cov_cfg.get("policies") and cfg["reps"] >= cfg["assertions"]["min_reps"]:
        for name in cov_cfg["policies"]:
            if name not in ("threshold", "median-optimal"):
                print(f"error: unknown coverage policy {name!r}", file=sys.stderr)
                return 2
            req = ThresholdRule(0) if name == "threshold" else LEARN_MEDIAN_OPTIMAL
            coverage.append(coverage_experiment(dgp, req, cov_cfg["n"], cov_cfg["reps"], seed=cfg["seed"]).to_dict())
        atomic_write(os.path.join(args.out_dir, "coverage.json"), json.dumps(coverage, indent=2))

    results = check_assertions(report, coverage, cfg)
    failed = [r for r in results if not r["passed"]]
    summary = {"schema_version": SCHEMA_VERSION, "command": "simulate", "config": cfg,
               "assertions": results, "passed": not failed}
    atomic_write(os.path.join(args.out_dir, "summary.json"), json.dumps(summary, indent=2))
    for r in failed:
        print(f"FAIL {r['name']}: {r['detail']}", file=sys.stderr)
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acme-otr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", help="cross-fitted ACME estimates for treatment policies on CSV data")
    ev.add_argument("--data", required=True)
    ev.add_argument("--covariates", required=True, help="comma-separated covariate column names")
    ev.add_argument("--treatment", required=True)
    ev.add_argument("--outcome", required=True)
    ev.add_argument("--propensity", type=float, default=None, help="known propensity score; default fits a logistic model")
    ev.add_argument("--policies", default="all",
                    help="'all' or a comma list of: " + ", ".join(STANDARD_POLICIES) + ", threshold")
    ev.add_argument("--threshold", default=None, metavar="COLUMN:VALUE", help="custom rule: treat iff COLUMN > VALUE")
    ev.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    ev.add_argument("--median-method", choices=("linear_quantile", "knn"), default="linear_quantile")
    ev.add_argument("--median-k", type=int, default=50)
    ev.add_argument("--density-method", choices=("knn", "nadaraya_watson"), default="knn")
    ev.add_argument("--density-k", type=int, default=None)
    ev.add_argument("--density-bandwidth-x", type=float, default=1.0)
    ev.add_argument("--bandwidth", type=float, default=None, help="outcome kernel bandwidth; default Silverman's rule")
    ev.add_argument("--mean-method", choices=("linear", "knn"), default="linear")
    ev.add_argument("--mean-k", type=int, default=50)
    ev.add_argument("--bins", type=int, default=30)
    ev.add_argument("--hist-out", default=None)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    il = sub.add_parser("illustrate", help="optimal-policy table for a discrete covariate model")
    il.add_argument("--model", required=True, help="model JSON path, or bundled 'case1' / 'case2'")
    il.add_argument("--out", required=True)
    il.set_defaults(func=cmd_illustrate)

    si = sub.add_parser("simulate", help="RMSE and coverage experiments on the lognormal model")
    si.add_argument("--config", default=None)
    si.add_argument("--reps", type=int, default=None, help="override the configured replication count")
    si.add_argument("--out-dir", required=True)
    si.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
