"""Feature construction: unit-level terms, cluster sufficient statistics, interactions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FeatureError


class ConstantFeatureWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FeatureTerm:
    """One column selector: raw covariate, its square, or a pairwise product."""

    kind: str  # "raw" | "square" | "interaction"
    i: int
    j: int | None = None

    def name(self, covariate_names):
        if self.kind == "raw":
            return covariate_names[self.i]
        if self.kind == "square":
            return f"{covariate_names[self.i]}^2"
        return f"{covariate_names[self.i]}*{covariate_names[self.j]}"


@dataclass(frozen=True)
class FeatureSpec:
    """Declarative list of unit-level feature terms plus standardization flags."""

    terms: tuple[FeatureTerm, ...]
    standardize: bool = True
    include_intercept: bool = False

    def validate(self, n_covariates):
        seen = set()
        for t in self.terms:
            if t.kind not in ("raw", "square", "interaction"):
                raise FeatureError(f"unknown term kind {t.kind!r}")
            idx = (t.kind, t.i, t.j)
            if idx in seen:
                raise FeatureError(f"duplicate feature term {idx}")
            seen.add(idx)
            for k in (t.i, t.j):
                if k is not None and not (0 <= k < n_covariates):
                    raise FeatureError(
                        f"term index {k} out of range for {n_covariates} covariates"
                    )
            if t.kind == "interaction" and t.j is None:
                raise FeatureError("interaction term needs two indices")


def default_feature_spec(ds, standardize=True):
    """Raw covariates plus squares of the continuous ones.

    A covariate is treated as continuous when it takes more than two distinct
    values in the data. Pairwise interactions are opt-in.
    """
    terms = [FeatureTerm("raw", j) for j in range(ds.n_covariates)]
    for j in range(ds.n_covariates):
        if len(np.unique(ds.X[:, j])) > 2:
            terms.append(FeatureTerm("square", j))
    return FeatureSpec(tuple(terms), standardize=standardize)


@dataclass
class FeatureSet:
    """Materialized feature blocks shared by every estimator.

    ``unit_features`` is n x d (standardized when requested), ``cluster_stats``
    is one row per cluster (means of the sufficient statistic), and
    ``interactions`` is the full first-order tensor product of the two,
    broadcast to units via cluster membership.
    """

    unit_features: np.ndarray
    unit_feature_names: list[str]
    cluster_stats: np.ndarray
    cluster_stat_names: list[str]
    interactions: np.ndarray | None = None
    interaction_names: list[str] = field(default_factory=list)
    centers: np.ndarray | None = None
    scales: np.ndarray | None = None
    dropped_constant: list[str] = field(default_factory=list)

    @property
    def d(self):
        return self.unit_features.shape[1]

    def unit_cluster_stats(self, ds):
        """Cluster stats broadcast to one row per unit."""
        return self.cluster_stats[ds.cluster_codes]


def build_unit_features(ds, spec):
    """Evaluate the requested terms column by column, standardizing if asked.

    Constant columns cannot be standardized; they are dropped with a warning so
    the scale never divides by zero. Returns (matrix, names, centers, scales,
    dropped_names).
    """
    spec.validate(ds.n_covariates)
    cols, names = [], []
    for t in spec.terms:
        if t.kind == "raw":
            col = ds.X[:, t.i]
        elif t.kind == "square":
            col = ds.X[:, t.i] ** 2
        else:
            col = ds.X[:, t.i] * ds.X[:, t.j]
        cols.append(col.astype(float))
        names.append(t.name(ds.covariate_names))

    dropped = []
    centers, scales, kept_cols, kept_names = [], [], [], []
    for col, name in zip(cols, names):
        if spec.standardize:
            if np.all(col == col[0]):
                dropped.append(name)
                warnings.warn(
                    f"feature {name!r} is constant and was dropped before standardization",
                    ConstantFeatureWarning,
                )
                continue
            m = col.mean()
            s = col.std(ddof=1) if ds.n > 1 else 1.0
            kept_cols.append((col - m) / s)
            centers.append(m)
            scales.append(s)
        else:
            kept_cols.append(col)
            centers.append(0.0)
            scales.append(1.0)
        kept_names.append(name)

    if spec.include_intercept:
        kept_cols.append(np.ones(ds.n))
        kept_names.append("(intercept)")
        centers.append(0.0)
        scales.append(1.0)

    if not kept_cols:
        F = np.empty((ds.n, 0))
    else:
        F = np.column_stack(kept_cols)
    return F, kept_names, np.asarray(centers), np.asarray(scales), dropped


def build_cluster_stats(ds, covariate_indices=None, include_treatment=True):
    """Per-cluster means of the sufficient statistic S(x, z).

    Default S = (all raw covariates, treatment indicator); the last column is
    then the cluster's treated proportion.
    """
    if covariate_indices is None:
        covariate_indices = list(range(ds.n_covariates))
    cols = [ds.X[:, j] for j in covariate_indices]
    names = [f"mean({ds.covariate_names[j]})" for j in covariate_indices]
    if include_treatment:
        cols.append(ds.z.astype(float))
        names.append("treated_share")
    S = np.column_stack(cols) if cols else np.empty((ds.n, 0))
    K = ds.n_clusters
    out = np.zeros((K, S.shape[1]))
    for k in range(K):
        rows = ds.cluster_index[ds.clusters[k]]
        out[k] = S[rows].mean(axis=0)
    return out, names


def build_interactions(ds, unit_features, cluster_stats, unit_names=None, stat_names=None):
    """Tensor product: column (j, k) for unit i is unit_features[i, j] * stats[G_i, k]."""
    n, d = unit_features.shape
    if n != ds.n:
        raise FeatureError("unit feature block does not match the dataset")
    if cluster_stats.shape[0] != ds.n_clusters:
        raise FeatureError("cluster stats block does not match the dataset's clusters")
    p = cluster_stats.shape[1]
    broadcast = cluster_stats[ds.cluster_codes]  # (n, p)
    psi = (unit_features[:, :, None] * broadcast[:, None, :]).reshape(n, d * p)
    if unit_names is None:
        unit_names = [f"f{j}" for j in range(d)]
    if stat_names is None:
        stat_names = [f"s{k}" for k in range(p)]
    names = [f"{u}*{s}" for u in unit_names for s in stat_names]
    return psi, names


def build_feature_set(ds, spec=None, with_interactions=True,
                      stat_covariate_indices=None, stat_include_treatment=True):
    """Build every block an estimator might need from one dataset."""
    if spec is None:
        spec = default_feature_spec(ds)
    F, names, centers, scales, dropped = build_unit_features(ds, spec)
    S, snames = build_cluster_stats(
        ds, covariate_indices=stat_covariate_indices,
        include_treatment=stat_include_treatment,
    )
    psi, pnames = (None, [])
    if with_interactions:
        psi, pnames = build_interactions(ds, F, S, names, snames)
    return FeatureSet(
        unit_features=F,
        unit_feature_names=names,
        cluster_stats=S,
        cluster_stat_names=snames,
        interactions=psi,
        interaction_names=pnames,
        centers=centers,
        scales=scales,
        dropped_constant=dropped,
    )
