"""Data generating process and Monte Carlo harness for estimator comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, filter_degenerate_clusters
from .errors import ClusterbalError, EstimationError
from .estimators import METHODS, make_estimator
from .features import build_feature_set, default_feature_spec

# Covariates dichotomized at >= 0 (zero-based indices for X1, X3, X5, X6, X8, X9).
BINARY_COLS = (0, 2, 4, 5, 7, 8)

# Treatment-model terms (zero-based indices).
PS_LINEAR = {0: 0.8, 1: -0.25, 2: 0.6, 3: -0.4, 4: -0.8, 5: -0.5, 6: 0.7}
PS_QUADRATIC = {1: -0.25, 3: -0.4, 6: 0.7}
PS_PAIRWISE = {
    (0, 2): 0.4,
    (1, 3): -0.175,
    (2, 4): 0.3,
    (3, 5): -0.28,
    (4, 6): -0.4,
    (0, 5): 0.4,
    (1, 2): -0.175,
    (2, 3): 0.3,
    (3, 4): -0.2,
    (4, 5): -0.4,
}

OUTCOME_INTERCEPT = -3.85
OUTCOME_COEF = {0: 0.3, 1: -0.36, 2: -0.73, 3: -0.2, 7: 0.71, 8: -0.19, 9: 0.26}

# Methods whose constraints need both arms in every cluster.
NEEDS_BOTH_ARMS = ("hierarchical-bw", "mundlak-avto")

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SimConfig:
    """Simulation design: cluster layout, confounding strength, estimator list.

    ``alpha_u=None`` resolves to 0.5 whenever ``rho_u > 0`` and to 0 otherwise.
    ``estimators`` entries are mappings with a "method" key plus estimator
    options (optionally "label" and "cluster_filter").
    """

    n_clusters: int = 100
    units_per_cluster: int = 50
    size_distribution: str = "fixed"  # "fixed" | "poisson"
    rho_u: float = 0.0
    alpha_u: float | None = None
    beta0: float = 0.0
    tau: float = -0.4
    noise_sd: float = math.sqrt(2.0)
    n_reps: int = 200
    seed: int = 0
    alpha: float = 0.05
    estimators: tuple = (
        {"method": "standard-bw"},
        {"method": "mundlak-gb"},
    )

    def resolved_alpha_u(self):
        if self.alpha_u is not None:
            return float(self.alpha_u)
        return 0.5 if self.rho_u > 0 else 0.0

    def validate(self):
        if self.n_clusters < 2:
            raise EstimationError("n_clusters must be at least 2")
        if self.n_reps < 1:
            raise EstimationError("n_reps must be at least 1")
        if self.units_per_cluster < 1:
            raise EstimationError("units_per_cluster must be at least 1")
        if self.size_distribution not in ("fixed", "poisson"):
            raise EstimationError("size_distribution must be 'fixed' or 'poisson'")
        if not self.estimators:
            raise EstimationError("estimators list is empty")
        for i, cfg in enumerate(self.estimators):
            if cfg.get("method") not in METHODS:
                raise EstimationError(
                    f"estimators[{i}].method must be one of {METHODS}"
                )


@dataclass(frozen=True)
class SimTruth:
    """Hidden generating quantities for one replication."""

    cluster_u: np.ndarray
    propensity: np.ndarray
    tau: float


def _rng(seed, rep, stream):
    key = np.array([seed & _MASK64, ((rep << 8) | stream) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def treatment_index(X, u_by_unit, rho_u, beta0):
    """Linear predictor of the treatment model (before the link)."""
    f = np.full(X.shape[0], beta0, dtype=float)
    for j, c in PS_LINEAR.items():
        f += c * X[:, j]
    for j, c in PS_QUADRATIC.items():
        f += c * X[:, j] ** 2
    for (i, j), c in PS_PAIRWISE.items():
        f += c * X[:, i] * X[:, j]
    return f + rho_u * u_by_unit


def generate(config, rep_index=0):
    """One simulated dataset plus its hidden truth record.

    Streams are keyed by (seed, rep, stream), so replications are independent
    and order-insensitive. Cluster sizes under "poisson" are floored at 1.
    """
    config.validate()
    K = config.n_clusters
    if config.size_distribution == "fixed":
        sizes = np.full(K, config.units_per_cluster, dtype=np.int64)
    else:
        sizes = _rng(config.seed, rep_index, 0).poisson(
            config.units_per_cluster, size=K
        )
        sizes = np.maximum(sizes, 1)
    codes = np.repeat(np.arange(K), sizes)
    n = int(sizes.sum())

    X = _rng(config.seed, rep_index, 1).standard_normal((n, 10))
    for j in BINARY_COLS:
        X[:, j] = (X[:, j] >= 0).astype(float)

    u = _rng(config.seed, rep_index, 2).standard_normal(K)
    f = treatment_index(X, u[codes], config.rho_u, config.beta0)
    e = 0.8 * expit(f) + 0.15
    z = (_rng(config.seed, rep_index, 3).uniform(size=n) < e).astype(np.int8)

    alpha_u = config.resolved_alpha_u()
    y = np.full(n, OUTCOME_INTERCEPT)
    y += config.tau * z
    for j, c in OUTCOME_COEF.items():
        y += c * X[:, j]
    y += alpha_u * u[codes]
    y += config.noise_sd * _rng(config.seed, rep_index, 4).standard_normal(n)

    labels = [f"g{k:04d}" for k in codes]
    unit_ids = [f"u{i:06d}" for i in range(n)]
    ds = Dataset(X, z, labels, y=y, unit_ids=unit_ids,
                 covariate_names=[f"x{j + 1}" for j in range(10)])
    return ds, SimTruth(cluster_u=u, propensity=e, tau=config.tau)


def _estimator_label(cfg):
    return cfg.get("label", cfg["method"])


def _estimator_filter_mode(cfg):
    if "cluster_filter" in cfg:
        return cfg["cluster_filter"]
    return "drop-both" if cfg["method"] in NEEDS_BOTH_ARMS else "keep-all"


@dataclass
class SimResult:
    config: SimConfig
    records: list  # one dict per (rep, estimator)
    per_estimator: dict  # label -> metrics dict

    def metric_rows(self):
        """Tidy rows (estimator, rho_u, metric, value)."""
        rows = []
        for label, metrics in self.per_estimator.items():
            for metric, value in metrics.items():
                rows.append((label, self.config.rho_u, metric, value))
        return rows


def aggregate_records(config, records):
    """Per-estimator metrics from per-rep records (reduced in rep order)."""
    labels = []
    for cfg in config.estimators:
        lab = _estimator_label(cfg)
        if lab not in labels:
            labels.append(lab)
    tau = config.tau
    per_estimator = {}
    for label in labels:
        rows = sorted(
            (r for r in records if r["estimator"] == label), key=lambda r: r["rep"]
        )
        ok = [r for r in rows if not r["failed"]]
        n_ok = len(ok)
        metrics = {
            "n_reps": len(rows),
            "n_success": n_ok,
            "failure_rate": (len(rows) - n_ok) / len(rows) if rows else float("nan"),
        }
        if n_ok:
            est = np.array([r["att"] for r in ok])
            lo = np.array([r["ci_low"] for r in ok])
            hi = np.array([r["ci_high"] for r in ok])
            metrics.update(
                {
                    "mean_estimate": float(est.mean()),
                    "standardized_abs_bias": float(
                        abs(est.mean() - tau) / abs(tau)
                    ) if tau != 0 else float("nan"),
                    "abs_bias": float(abs(est.mean() - tau)),
                    "rmse": float(np.sqrt(np.mean((est - tau) ** 2))),
                    "ci_coverage": float(np.mean((lo <= tau) & (tau <= hi))),
                    "mean_ci_width": float(np.mean(hi - lo)),
                    "mean_ess": float(np.mean([r["ess"] for r in ok])),
                    "mean_dropped_clusters": float(
                        np.mean([r["dropped_clusters"] for r in ok])
                    ),
                }
            )
        per_estimator[label] = metrics
    return per_estimator


def run_monte_carlo(config, progress=None):
    """Generate, fit every configured estimator, and aggregate the metrics.

    A failing estimator marks that (rep, estimator) cell failed and is excluded
    from the aggregates; the failure rate is reported. Identical (seed, config)
    inputs give identical results regardless of execution order.
    """
    config.validate()
    records = []
    for rep in range(config.n_reps):
        ds, truth = generate(config, rep)
        fs_cache = {}
        for cfg in config.estimators:
            label = _estimator_label(cfg)
            method = cfg["method"]
            options = {
                k: v
                for k, v in cfg.items()
                if k not in ("method", "label", "cluster_filter")
            }
            row = {"rep": rep, "estimator": label, "failed": False, "error": ""}
            try:
                report = filter_degenerate_clusters(ds, _estimator_filter_mode(cfg))
                retained = report.retained
                row["dropped_clusters"] = len(report.dropped_clusters)
                row["dropped_units"] = report.dropped_unit_count
                est = make_estimator(method, **options)
                cache_key = (id(retained), est._needs_interactions())
                if est.features is None and cache_key in fs_cache:
                    fs = fs_cache[cache_key]
                else:
                    fs = build_feature_set(
                        retained,
                        est.features or default_feature_spec(retained),
                        with_interactions=est._needs_interactions(),
                    )
                    if est.features is None:
                        fs_cache[cache_key] = fs
                est.fit_dataset(retained, feature_set=fs)
                eff = est.estimate(alpha=config.alpha)
                row.update(
                    {
                        "att": eff.att,
                        "ci_low": eff.ci_low,
                        "ci_high": eff.ci_high,
                        "ess": eff.ess_control,
                        "hajek_normalized": eff.hajek_normalized,
                    }
                )
            except ClusterbalError as exc:
                row.update(
                    {
                        "failed": True,
                        "error": str(exc),
                        "att": float("nan"),
                        "ci_low": float("nan"),
                        "ci_high": float("nan"),
                        "ess": float("nan"),
                    }
                )
                row.setdefault("dropped_clusters", 0)
                row.setdefault("dropped_units", 0)
            records.append(row)
        if progress is not None:
            progress(rep + 1, config.n_reps)
    per_estimator = aggregate_records(config, records)
    return SimResult(config=config, records=records, per_estimator=per_estimator)
