"""Command-line entry point.

Subcommands ``fit``, ``screen``, ``crossfit``, ``test`` and ``simulate``.
Data files are long-format CSV with columns ``unit_id, k, y, x1..xp`` (one
row per unit and measurement, ``k`` running over ``1..l``).  Configuration
is JSON, validated against a schema before anything is computed.
Coordinate indices in files are 1-based.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from .crossfit import CrossfitConfig, crossfit, crossfit_wald, working_independence_wald
from .inference import HypothesisSpec
from .model import Dataset, ModelSpec, residuals
from .penalty import PenaltyConfig
from .screening import BasisFamily, screen
from .simulate import (
    EXPERIMENTS,
    run_experiment,
    scenario_from_dict,
    summary_document,
    write_metrics_csv,
)
from .solver import SolverConfig, WorkingCovariance, penalized_solve

logger = logging.getLogger("crossfit_gee")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad command-line input: malformed data, invalid config, missing file."""


class NumericalFailure(Exception):
    """The computation ran but did not produce a trustworthy answer."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INDEX_LIST = {"type": "array", "items": {"type": "integer", "minimum": 1}, "uniqueItems": True}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "data": {"type": "string"},
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["link", "m_set"],
            "properties": {
                "link": {"enum": ["identity", "log", "logit"]},
                "m_set": _INDEX_LIST,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "penalty": {"enum": ["scad", "mcp"]},
                "a": {"type": ["number", "null"]},
                "lambda": {"type": ["number", "null"], "minimum": 0},
                "tol": _POS,
                "max_iter": {"type": "integer", "minimum": 1},
                "zero_threshold": {"type": "number", "minimum": 0},
                "n_lambda": {"type": "integer", "minimum": 1},
            },
        },
        "working": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["identity", "fixed"]},
                "matrix": {"type": "array", "items": {"type": "array", "items": _NUM}},
            },
        },
        "screening": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "basis_h": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "c": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "n_lambda": {"type": "integer", "minimum": 2},
            },
        },
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nu": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "c_h": _POS,
                "jitter": _POS,
            },
        },
        "hypothesis": {
            "type": "object",
            "additionalProperties": False,
            "required": ["C", "t"],
            "properties": {
                "C": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _NUM}},
                "t": {"oneOf": [{"type": "array", "items": _NUM}, {"const": "estimate"}]},
                "drift": {"type": "array", "items": _NUM},
            },
        },
    },
}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment", "scenario"],
    "properties": {
        "experiment": {"type": "string"},
        "out": {"type": "string"},
        "reps": {"type": "integer", "minimum": 1},
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 4},
                "p": {"type": "integer", "minimum": 2},
                "l": {"type": "integer", "minimum": 1},
                "s": {"type": "integer", "minimum": 0},
                "m": {"type": "integer", "minimum": 0},
                "link": {"enum": ["identity", "log", "logit"]},
                "covariance": {"enum": ["homoscedastic", "diag-exp", "exchangeable-varying"]},
                "active_set": _INDEX_LIST,
                "strength": _NUM,
                "rho": _NUM,
                "sigma2": _POS,
                "signal": _NUM,
                "m_value": _NUM,
                "drift": {"type": ["array", "null"], "items": _NUM},
                "errors": {"enum": ["gaussian", "bounded"]},
                "working": {"enum": ["identity", "true"]},
                "n_large": {"type": ["integer", "null"], "minimum": 4},
                "penalty": {"enum": ["scad", "mcp"]},
                "seed": {"type": "integer", "minimum": 0},
                "replications": {"type": "integer", "minimum": 1},
            },
        },
    },
}


def load_json(path, schema) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"{path}: config error at {where}: {exc.message}") from None
    return doc


def _zero_based(indices, p, what) -> tuple:
    out = []
    for j in indices:
        if not 1 <= j <= p:
            raise InputError(f"{what} index {j} outside 1..{p}")
        out.append(j - 1)
    return tuple(out)


def build_spec(cfg: dict, data: Dataset) -> ModelSpec:
    model = cfg["model"]
    m_set = _zero_based(model["m_set"], data.p, "m_set")
    hyp = None
    h = cfg.get("hypothesis")
    if h is not None and h["t"] != "estimate":
        hyp = _hypothesis(h, m_set, h["t"])
    return ModelSpec(model["link"], m_set, hyp)


def _hypothesis(h: dict, m_set, t) -> HypothesisSpec:
    try:
        return HypothesisSpec(np.asarray(h["C"], dtype=float), np.asarray(t, dtype=float), m_set)
    except ValueError as exc:
        raise InputError(f"hypothesis: {exc}") from None


def build_solver(cfg: dict) -> SolverConfig:
    s = cfg.get("solver", {})
    try:
        pen = PenaltyConfig(s.get("penalty", "scad"), 0.0, s.get("a"))
        return SolverConfig(
            lambda_n=s.get("lambda"),
            penalty=pen,
            tol=s.get("tol", 1e-8),
            max_iter=s.get("max_iter", 100),
            zero_threshold=s.get("zero_threshold", 1e-4),
            n_lambda=s.get("n_lambda", 20),
        )
    except ValueError as exc:
        raise InputError(f"solver: {exc}") from None


def build_working(cfg: dict, data: Dataset) -> WorkingCovariance:
    w = cfg.get("working", {"kind": "identity"})
    if w["kind"] == "identity":
        return WorkingCovariance.identity()
    m = np.asarray(w.get("matrix"), dtype=float)
    if m.shape != (data.l, data.l):
        raise InputError(f"working matrix must be {data.l} x {data.l}")
    try:
        return WorkingCovariance.fixed(m)
    except ValueError as exc:
        raise InputError(f"working: {exc}") from None


def build_crossfit(cfg: dict, threads: int) -> CrossfitConfig:
    sc = cfg.get("screening", {})
    ke = cfg.get("kernel", {})
    return CrossfitConfig(
        solver=build_solver(cfg),
        basis_h=sc.get("basis_h", 3),
        alpha=sc.get("alpha", 0.05),
        alpha_c=sc.get("c"),
        screen_n_lambda=sc.get("n_lambda", 50),
        nu=ke.get("nu", 1.0),
        c_h=ke.get("c_h", 1.0),
        jitter=ke.get("jitter", 1e-6),
        n_jobs=threads,
    )


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def read_long_csv(path) -> tuple[Dataset, list]:
    """Parse a long-format CSV into a :class:`Dataset`.

    Units keep their order of first appearance.  Returns the dataset and
    the list of unit ids.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read data {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        p = len(header) - 3
        expected = ["unit_id", "k", "y"] + [f"x{j}" for j in range(1, p + 1)]
        if p < 1 or header != expected:
            raise InputError(f"{path} line 1: header must be unit_id,k,y,x1..xp")
        cells: dict = {}
        order: list = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path} line {line}: expected {len(header)} fields, got {len(row)}")
            uid = row[0].strip()
            try:
                k = int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError:
                raise InputError(f"{path} line {line}: non-numeric value") from None
            if k < 1:
                raise InputError(f"{path} line {line}: measurement index k must be >= 1")
            if not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path} line {line}: non-finite value")
            if uid not in cells:
                cells[uid] = {}
                order.append(uid)
            if k in cells[uid]:
                raise InputError(f"{path} line {line}: duplicate measurement {k} for unit {uid}")
            cells[uid][k] = (line, vals)
    if not order:
        raise InputError(f"{path}: no data rows")
    l = max(max(c) for c in cells.values())  # noqa: E741
    n = len(order)
    x = np.empty((n, p, l))
    y = np.empty((n, l))
    for i, uid in enumerate(order):
        got = cells[uid]
        if sorted(got) != list(range(1, l + 1)):
            line = min(v[0] for v in got.values())
            raise InputError(f"{path} line {line}: unit {uid} lacks measurements "
                             f"{sorted(set(range(1, l + 1)) - set(got))}")
        for k, (_, vals) in got.items():
            y[i, k - 1] = vals[0]
            x[i, :, k - 1] = vals[1:]
    try:
        return Dataset(x, y), order
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def write_long_csv(path, data: Dataset, unit_ids=None) -> None:
    unit_ids = unit_ids or [str(i + 1) for i in range(data.n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "k", "y"] + [f"x{j}" for j in range(1, data.p + 1)])
        for i in range(data.n):
            for k in range(data.l):
                w.writerow([unit_ids[i], k + 1, repr(float(data.y[i, k]))]
                           + [repr(float(v)) for v in data.x[i, :, k]])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _round(obj, digits: int = 10):
    """Round floats to ``digits`` significant digits, recursively."""
    if isinstance(obj, dict):
        return {str(k): _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        v = float(f"{v:.{digits}g}")
        return 0.0 if v == 0 else v
    return obj


def dump_report(doc: dict, path) -> None:
    doc = _round(doc)
    doc["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _one_based(idx) -> list:
    return [int(j) + 1 for j in idx]


def _fit_doc(fit) -> dict:
    return {
        "coefficients": fit.coef,
        "support": _one_based(fit.support),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "final_update_norm": fit.final_update_norm,
        "equation_norm_on_support": fit.equation_norm_on_support,
        "kkt_violation": fit.kkt_violation,
        "lambda": fit.lambda_n,
        "hbic": fit.hbic,
    }


def _wald_doc(rep) -> dict:
    return {"statistic": rep.statistic, "df": rep.df, "p_value": rep.p_value,
            "noncentrality": rep.noncentrality}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_run(args):
    cfg = load_json(args.config, RUN_SCHEMA)
    data_path = args.data or cfg.get("data")
    if data_path is None:
        raise InputError("no data file given (use --data or the 'data' config key)")
    if not os.path.isabs(data_path) and args.data is None:
        data_path = str(Path(args.config).parent / data_path)
    data, _ = read_long_csv(data_path)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    return cfg, data, seed, args.out or cfg.get("out")


def cmd_fit(args) -> int:
    cfg, data, seed, out = _load_run(args)
    spec = build_spec(cfg, data)
    fit = penalized_solve(data, spec, build_working(cfg, data), build_solver(cfg))
    doc = {"command": "fit", "n": data.n, "p": data.p, "l": data.l, "seed": seed,
           "fit": _fit_doc(fit)}
    dump_report(doc, out)
    if not fit.converged:
        raise NumericalFailure("solver did not converge")
    return EXIT_OK


def cmd_screen(args) -> int:
    cfg, data, seed, out = _load_run(args)
    spec = build_spec(cfg, data)
    fit = penalized_solve(data, spec, WorkingCovariance.identity(), build_solver(cfg))
    sc = cfg.get("screening", {})
    res = screen(data, residuals(data, fit.coef, spec.link),
                 BasisFamily.polynomial(sc.get("basis_h", 3)), sc.get("alpha", 0.05),
                 sc.get("c"), sc.get("n_lambda", 50))
    doc = {
        "command": "screen", "n": data.n, "p": data.p, "l": data.l, "seed": seed,
        "initial_fit": _fit_doc(fit),
        "w_statistics": res.w_stats,
        "critical_value": res.critical_value,
        "active_sets": [_one_based(a) for a in res.active_sets],
        "active_set": _one_based(res.union_set),
        "jittered": res.jittered,
    }
    dump_report(doc, out)
    return EXIT_OK


def _crossfit_doc(data, spec, res) -> dict:
    folds = []
    for f in res.folds:
        folds.append({
            "fold": f.fold_id,
            "size": int(f.index.size),
            "active_set": _one_based(f.covariance.active_set),
            "bandwidths": f.covariance.bandwidth,
            "initial": _fit_doc(f.initial),
            "refit": _fit_doc(f.refit),
        })
    return {
        "beta_hat": res.beta_hat,
        "support": _one_based(res.support),
        "fold_support_disagreement": _one_based(res.fold_support_disagreement),
        "folds": folds,
        "audit": {"evaluations": len(res.audit),
                  "violations": sum(a.violation for a in res.audit)},
    }


def _run_crossfit(args):
    cfg, data, seed, out = _load_run(args)
    spec = build_spec(cfg, data)
    threads = args.threads or os.cpu_count() or 1
    res = crossfit(data, spec, build_crossfit(cfg, threads), seed=seed)
    hyp = spec.hypothesis
    h = cfg.get("hypothesis")
    if h is not None and h["t"] == "estimate":
        m = list(spec.m_set)
        hyp = _hypothesis(h, spec.m_set, np.asarray(h["C"], dtype=float) @ res.beta_hat[m])
    drift = None if h is None else h.get("drift")
    return cfg, data, seed, out, spec, res, hyp, drift


def cmd_crossfit(args) -> int:
    cfg, data, seed, out, spec, res, hyp, drift = _run_crossfit(args)
    doc = {"command": "crossfit", "n": data.n, "p": data.p, "l": data.l, "seed": seed,
           **_crossfit_doc(data, spec, res)}
    if hyp is not None:
        rep, _ = crossfit_wald(data, res, spec, hyp, drift)
        doc["wald"] = _wald_doc(rep)
    dump_report(doc, out)
    return EXIT_OK


def cmd_test(args) -> int:
    cfg, data, seed, out, spec, res, hyp, drift = _run_crossfit(args)
    if hyp is None:
        raise InputError("the test command needs a 'hypothesis' in the config")
    rep, sw = crossfit_wald(data, res, spec, hyp, drift)
    rep0, sw0, fit0 = working_independence_wald(data, spec, build_solver(cfg), hyp, drift)
    doc = {
        "command": "test", "n": data.n, "p": data.p, "l": data.l, "seed": seed,
        "hypothesis": {"C": hyp.C, "t": hyp.t, "m_set": _one_based(hyp.m_set)},
        "crossfit": {**_wald_doc(rep), "beta_hat": res.beta_hat},
        "working_independence": {**_wald_doc(rep0), "beta_hat": fit0.coef},
    }
    dump_report(doc, out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc = load_json(args.config, SCENARIO_SCHEMA)
    name = doc["experiment"]
    if name not in EXPERIMENTS:
        raise InputError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    sc = dict(doc["scenario"])
    if "active_set" in sc:
        p = sc.get("p", 50)
        sc["active_set"] = _zero_based(sc["active_set"], p, "active_set")
    if args.seed is not None:
        sc["seed"] = args.seed
    try:
        cfg = scenario_from_dict(sc)
    except ValueError as exc:
        raise InputError(f"scenario: {exc}") from None
    reps = args.reps or doc.get("reps") or cfg.replications
    threads = args.threads or os.cpu_count() or 1
    try:
        result = run_experiment(name, cfg, reps, n_jobs=threads)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out or doc.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result, out / "metrics.csv")
    summary = summary_document(result)
    summary["config"]["active_set"] = _one_based(cfg.active_set)
    dump_report(summary, out / "summary.json")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "screen": cmd_screen,
    "crossfit": cmd_crossfit,
    "test": cmd_test,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossfit-gee",
        description="Cross-fitted penalized estimating equations with covariance screening.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit": "penalized fit with a fixed working covariance",
        "screen": "screen covariates driving the covariance",
        "crossfit": "two-fold cross-fitted estimate (with a Wald test if configured)",
        "test": "Wald test, cross-fitted and working-independence",
        "simulate": "run a Monte Carlo experiment",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON configuration file")
        if name != "simulate":
            p.add_argument("--data", help="long-format CSV (overrides the config)")
        p.add_argument("--out", help="output file (output directory for simulate)")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--threads", type=int, help="worker count (default: all cores)")
        if name == "simulate":
            p.add_argument("--reps", type=int, help="replications (overrides the config)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
