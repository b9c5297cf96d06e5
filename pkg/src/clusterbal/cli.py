"""Command-line front end: estimate | balance | simulate | validate.

All configuration comes from a single JSON file; --seed and --out override the
corresponding config fields. stdout carries one machine-readable JSON document
per run; progress goes to stderr. Every output file embeds the SHA-256 of the
resolved config and the seed, and numbers are printed with 17 significant
digits so they round-trip exactly.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .data import ColumnSchema, filter_degenerate_clusters, load_csv, FILTER_MODES
from .diagnostics import balance_report
from .errors import ClusterbalError, ConfigError
from .estimators import METHODS, make_estimator
from .features import FeatureSpec, FeatureTerm, build_feature_set, default_feature_spec
from .inference import OUTCOME_MODELS
from .simulation import SimConfig, run_monte_carlo

_FMT = "{:.17g}"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return _FMT.format(v)
    return str(v)


def _config_hash(config):
    # the output directory is a location, not an input; keep hashes portable
    material = {k: v for k, v in config.items() if k != "out"}
    canonical = json.dumps(material, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _require(config, key, path, types, default=None, required=False):
    if key not in config:
        if required:
            raise ConfigError(f"{path}.{key}: missing required field")
        return default
    value = config[key]
    if types is not None and not isinstance(value, types):
        raise ConfigError(f"{path}.{key}: expected {types}, got {type(value).__name__}")
    return value


def _parse_feature_spec(node, path):
    if node is None or node == "default":
        return None
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected an object or \"default\"")
    terms_node = node.get("terms", "default")
    standardize = node.get("standardize", True)
    if not isinstance(standardize, bool):
        raise ConfigError(f"{path}.standardize: expected a boolean")
    if terms_node == "default":
        if standardize:
            return None
        raise ConfigError(
            f"{path}: default terms with standardize=false is not supported; "
            f"list the terms explicitly"
        )
    if not isinstance(terms_node, list):
        raise ConfigError(f"{path}.terms: expected a list or \"default\"")
    terms = []
    for i, t in enumerate(terms_node):
        if not isinstance(t, dict) or "kind" not in t:
            raise ConfigError(f"{path}.terms[{i}]: expected an object with a kind")
        kind = t["kind"]
        if kind not in ("raw", "square", "interaction"):
            raise ConfigError(f"{path}.terms[{i}].kind: unknown kind {kind!r}")
        terms.append(FeatureTerm(kind, int(t.get("i", 0)), t.get("j")))
    return FeatureSpec(
        tuple(terms),
        standardize=standardize,
        include_intercept=bool(node.get("include_intercept", False)),
    )


def _parse_schema(node, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected an object")
    for key in ("treatment", "outcome", "cluster"):
        if key not in node:
            raise ConfigError(f"{path}.{key}: missing required field")
    cov = node.get("covariates")
    if not isinstance(cov, list) or not cov:
        raise ConfigError(f"{path}.covariates: expected a nonempty list")
    return ColumnSchema(
        treatment=str(node["treatment"]),
        outcome=str(node["outcome"]),
        cluster=str(node["cluster"]),
        covariates=tuple(str(c) for c in cov),
        unit_id=str(node["unit_id"]) if "unit_id" in node else None,
    )


def _parse_estimators(node, path, allow_empty=False):
    if not isinstance(node, list) or (not node and not allow_empty):
        raise ConfigError(f"{path}: expected a nonempty list")
    out = []
    for i, e in enumerate(node):
        if not isinstance(e, dict):
            raise ConfigError(f"{path}[{i}]: expected an object")
        method = e.get("method")
        if method not in METHODS:
            raise ConfigError(
                f"{path}[{i}].method: unknown estimator {method!r}; "
                f"expected one of {METHODS}"
            )
        entry = dict(e)
        if "features" in entry:
            entry["features"] = _parse_feature_spec(entry["features"], f"{path}[{i}].features")
        if "cluster_filter" in entry and entry["cluster_filter"] not in FILTER_MODES:
            raise ConfigError(
                f"{path}[{i}].cluster_filter: expected one of {FILTER_MODES}"
            )
        out.append(entry)
    labels = [e.get("label", e["method"]) for e in out]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"{path}: duplicate estimator labels; set distinct 'label' fields")
    return out


def _load_config(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("config root must be a JSON object")
    if args.out is not None:
        config["out"] = args.out
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _out_dir(config):
    out = _require(config, "out", "config", str, default="clusterbal-out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_csv(path, header, rows, stamp):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_sha256={stamp[0]} seed={stamp[1]}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path, payload, stamp):
    payload = dict(payload)
    payload["config_sha256"] = stamp[0]
    payload["seed"] = stamp[1]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _prepare_estimation(config, allow_no_estimators=False):
    input_path = _require(config, "input", "config", str, required=True)
    schema = _parse_schema(_require(config, "schema", "config", dict, required=True), "config.schema")
    estimators = _parse_estimators(
        _require(config, "estimators", "config", list,
                 default=[] if allow_no_estimators else None,
                 required=not allow_no_estimators),
        "config.estimators",
        allow_empty=allow_no_estimators,
    )
    features = _parse_feature_spec(config.get("features"), "config.features")
    mode = _require(config, "cluster_filter", "config", str, default="auto")
    if mode != "auto" and mode not in FILTER_MODES:
        raise ConfigError(f"config.cluster_filter: expected 'auto' or one of {FILTER_MODES}")
    alpha = float(_require(config, "alpha", "config", (int, float), default=0.05))
    if not 0 < alpha < 1:
        raise ConfigError("config.alpha: must be in (0, 1)")
    bias_correction = bool(config.get("bias_correction", False))
    outcome_model = config.get("outcome_model")
    if outcome_model is not None and outcome_model not in OUTCOME_MODELS:
        raise ConfigError(f"config.outcome_model: expected one of {OUTCOME_MODELS}")
    ds = load_csv(input_path, schema)
    return ds, estimators, features, mode, alpha, bias_correction, outcome_model


def _filter_for(estimator_cfg, default_mode):
    if "cluster_filter" in estimator_cfg:
        return estimator_cfg["cluster_filter"]
    if default_mode != "auto":
        return default_mode
    if estimator_cfg["method"] in ("hierarchical-bw", "mundlak-avto"):
        return "drop-both"
    return "keep-all"


def _fit_one(ds, estimator_cfg, shared_features, mode):
    method = estimator_cfg["method"]
    options = {
        k: v for k, v in estimator_cfg.items()
        if k not in ("method", "label", "cluster_filter")
    }
    if "features" not in options and shared_features is not None:
        options["features"] = shared_features
    report = filter_degenerate_clusters(ds, _filter_for(estimator_cfg, mode))
    est = make_estimator(method, **options)
    est.fit_dataset(report.retained)
    return est, report


def cmd_estimate(config, stamp):
    ds, estimators, features, mode, alpha, bias_corr, outcome_model = _prepare_estimation(config)
    out = _out_dir(config)
    rows = []
    results = []
    n_failed = 0
    for cfg in estimators:
        label = cfg.get("label", cfg["method"])
        try:
            est, report = _fit_one(ds, cfg, features, mode)
            eff = est.estimate(alpha=alpha, outcome_model=outcome_model,
                               bias_correction=bias_corr)
            bal = est.balance()
            sol = est.solution_
            rows.append([
                label, eff.att, eff.ci_low, eff.ci_high, eff.ess_control,
                bal.l2_global, bal.l2_local, bal.pbr_global, bal.pbr_local,
                len(report.dropped_clusters), "ok", "",
            ])
            retained = est.dataset_
            _write_csv(
                os.path.join(out, f"weights_{label}.csv"),
                ["unit_id", "gamma", "implied_propensity"],
                [
                    (retained.unit_ids[i], sol.gamma[k], sol.implied_propensity[k])
                    for k, i in enumerate(np.flatnonzero(retained.z == 0))
                ],
                stamp,
            )
            detail = {
                "method": label,
                "effect": eff.to_dict(),
                "balance": bal.summary(),
                "solver_meta": sol.solver_meta,
                "flags": sol.flags,
                "sum_gamma": sol.sum_gamma,
                "dropped_clusters": [list(t) for t in report.dropped_clusters],
                "lam": getattr(est, "lam_", None),
            }
            _write_json(os.path.join(out, f"detail_{label}.json"), detail, stamp)
            results.append(detail)
        except ClusterbalError as exc:
            n_failed += 1
            rows.append([label, None, None, None, None, None, None, None, None,
                         None, "failed", str(exc)])
            results.append({"method": label, "error": str(exc)})
            print(f"estimator {label} failed: {exc}", file=sys.stderr)
    _write_csv(
        os.path.join(out, "effects.csv"),
        ["method", "att", "ci_low", "ci_high", "ess", "l2_global", "l2_local",
         "pbr_global", "pbr_local", "dropped_clusters", "status", "error"],
        rows, stamp,
    )
    payload = {
        "command": "estimate",
        "outputs": {"effects": os.path.join(out, "effects.csv")},
        "results": results,
    }
    print(json.dumps(payload, sort_keys=True, default=str))
    return 1 if n_failed == len(estimators) else 0


def cmd_balance(config, stamp):
    # an empty estimators list is a valid request for the unweighted baseline
    ds, estimators, features, mode, alpha, _, _ = _prepare_estimation(
        config, allow_no_estimators=True
    )
    out = _out_dir(config)
    spec = features or default_feature_spec(ds)
    fs = build_feature_set(ds, spec, with_interactions=False)
    base = balance_report(ds, fs.unit_features, fs.unit_feature_names, weights=None)
    _write_csv(
        os.path.join(out, "balance_unweighted.csv"),
        ["block", "cluster", "feature", "smd"],
        base.rows(), stamp,
    )
    summaries = {"unweighted": base.summary()}
    n_failed = 0
    for cfg in estimators:
        label = cfg.get("label", cfg["method"])
        try:
            est, report = _fit_one(ds, cfg, features, mode)
            bal = est.balance()
            _write_csv(
                os.path.join(out, f"balance_{label}.csv"),
                ["block", "cluster", "feature", "smd"],
                bal.rows(), stamp,
            )
            summaries[label] = bal.summary()
        except ClusterbalError as exc:
            n_failed += 1
            summaries[label] = {"error": str(exc)}
            print(f"estimator {label} failed: {exc}", file=sys.stderr)
    _write_json(os.path.join(out, "balance_summary.json"), {"summaries": summaries}, stamp)
    payload = {"command": "balance", "outputs": {"summary": os.path.join(out, "balance_summary.json")},
               "summaries": summaries}
    print(json.dumps(payload, sort_keys=True, default=str))
    return 1 if estimators and n_failed == len(estimators) else 0


def _parse_sim_config(config):
    node = _require(config, "sim", "config", dict, required=True)
    known = {
        "n_clusters", "units_per_cluster", "size_distribution", "rho_u", "alpha_u",
        "beta0", "tau", "noise_sd", "n_reps", "seed", "alpha", "estimators",
    }
    for key in node:
        if key not in known:
            raise ConfigError(f"config.sim.{key}: unknown field")
    kwargs = {k: v for k, v in node.items() if k != "estimators"}
    if "estimators" in node:
        kwargs["estimators"] = tuple(_parse_estimators(node["estimators"], "config.sim.estimators"))
    if "seed" not in kwargs and "seed" in config:
        kwargs["seed"] = config["seed"]
    try:
        sim = SimConfig(**kwargs)
        sim.validate()
    except ClusterbalError as exc:
        raise ConfigError(f"config.sim: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"config.sim: {exc}") from None
    return sim


def cmd_simulate(config, stamp):
    sim = _parse_sim_config(config)
    out = _out_dir(config)

    def progress(done, total):
        if done % 10 == 0 or done == total:
            print(f"rep {done}/{total}", file=sys.stderr)

    # Pin the BLAS pools so output bytes do not depend on thread settings.
    with threadpool_limits(limits=1):
        result = run_monte_carlo(sim, progress=progress)

    _write_csv(
        os.path.join(out, "sim_metrics.csv"),
        ["estimator", "rho_u", "metric", "value"],
        result.metric_rows(), stamp,
    )
    rec_header = ["rep", "estimator", "att", "ci_low", "ci_high", "ess",
                  "dropped_clusters", "failed", "error"]
    _write_csv(
        os.path.join(out, "sim_estimates.csv"),
        rec_header,
        [[r["rep"], r["estimator"], r["att"], r["ci_low"], r["ci_high"], r["ess"],
          r.get("dropped_clusters", 0), int(r["failed"]), r["error"]]
         for r in result.records],
        stamp,
    )
    _write_json(
        os.path.join(out, "sim_result.json"),
        {"command": "simulate", "per_estimator": result.per_estimator},
        stamp,
    )
    payload = {
        "command": "simulate",
        "outputs": {
            "metrics": os.path.join(out, "sim_metrics.csv"),
            "estimates": os.path.join(out, "sim_estimates.csv"),
            "result": os.path.join(out, "sim_result.json"),
        },
        "per_estimator": result.per_estimator,
    }
    print(json.dumps(payload, sort_keys=True, default=str))
    return 0


def cmd_validate(config, stamp):
    kind = "simulate" if "sim" in config else "estimate"
    if kind == "simulate":
        _parse_sim_config(config)
    else:
        _require(config, "input", "config", str, required=True)
        _parse_schema(_require(config, "schema", "config", dict, required=True), "config.schema")
        _parse_estimators(
            _require(config, "estimators", "config", list, required=True),
            "config.estimators",
        )
        _parse_feature_spec(config.get("features"), "config.features")
    print(json.dumps({"command": "validate", "valid": True, "kind": kind,
                      "config_sha256": stamp[0]}, sort_keys=True))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="clusterbal",
        description="Balancing-weight ATT estimation for clustered observational data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("estimate", "balance", "simulate", "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
    args = parser.parse_args(argv)

    try:
        config = _load_config(args)
        stamp = (_config_hash(config), config.get("seed", config.get("sim", {}).get("seed", 0)))
        handler = {
            "estimate": cmd_estimate,
            "balance": cmd_balance,
            "simulate": cmd_simulate,
            "validate": cmd_validate,
        }[args.command]
        return handler(config, stamp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ClusterbalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
