"""Balance and overlap diagnostics: SMD, L2 aggregates, PBR, effective sample size."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError


class ZeroSpreadWarning(UserWarning):
    pass


def _sample_var(col):
    return float(np.var(col, ddof=1)) if col.size >= 2 else 0.0


def smd(ds, feature_matrix, weights=None):
    """Standardized mean differences, global and per cluster.

    The denominator is always the unweighted pooled standard deviation
    s = sqrt(((s_treated^2) + (s_control^2)) / 2), so weighting moves only the
    numerator. ``weights`` is per unit (treated entries are ignored; controls
    use their balancing weight). Per-cluster entries are NaN when a cluster
    lacks an arm or has zero pooled spread; arms with a single unit contribute
    zero variance.

    Returns (smd_global, smd_local, zero_sd_features, n_missing_local).
    """
    F = np.asarray(feature_matrix, dtype=float)
    n, d = F.shape
    if n != ds.n:
        raise EstimationError("feature matrix does not match the dataset")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise EstimationError("weights must be one per unit")

    trt = ds.z == 1
    ctl = ~trt
    wc = w[ctl]
    if wc.sum() <= 0:
        raise EstimationError("control weights sum to zero")

    smd_global = np.full(d, np.nan)
    zero_sd = []
    for j in range(d):
        s = np.sqrt(0.5 * (_sample_var(F[trt, j]) + _sample_var(F[ctl, j])))
        if s == 0.0:
            zero_sd.append(j)
            warnings.warn(
                f"feature column {j} has zero pooled spread; excluded from SMD",
                ZeroSpreadWarning,
            )
            continue
        mean_t = F[trt, j].mean()
        mean_c = float(wc @ F[ctl, j]) / wc.sum()
        smd_global[j] = (mean_t - mean_c) / s

    K = ds.n_clusters
    smd_local = np.full((K, d), np.nan)
    for k in range(K):
        rows = ds.cluster_index[ds.clusters[k]]
        zk = ds.z[rows]
        if zk.sum() == 0 or zk.sum() == zk.size:
            continue
        rt = rows[zk == 1]
        rc = rows[zk == 0]
        wk = w[rc]
        for j in range(d):
            s = np.sqrt(0.5 * (_sample_var(F[rt, j]) + _sample_var(F[rc, j])))
            if s == 0.0:
                continue
            mean_t = F[rt, j].mean()
            mean_c = float(wk @ F[rc, j]) / wk.sum()
            smd_local[k, j] = (mean_t - mean_c) / s

    n_missing = int(np.isnan(smd_local).sum())
    return smd_global, smd_local, zero_sd, n_missing


def l2_aggregate(smd_global, smd_local):
    """Root-mean-square of available SMD entries, globally and locally."""
    g = np.asarray(smd_global, dtype=float).ravel()
    l = np.asarray(smd_local, dtype=float).ravel()
    g = g[~np.isnan(g)]
    l = l[~np.isnan(l)]
    if g.size == 0:
        raise EstimationError("no usable global SMD entries")
    l2g = float(np.sqrt(np.mean(g**2)))
    l2l = float(np.sqrt(np.mean(l**2))) if l.size else float("nan")
    return l2g, l2l


def pbr(unweighted_l2, weighted_l2):
    """Percent reduction of the L2 imbalance relative to no weighting."""
    if not np.isfinite(unweighted_l2) or unweighted_l2 == 0.0:
        return None
    return 100.0 * (1.0 - weighted_l2 / unweighted_l2)


def ess(weights):
    """Kish effective sample size (sum w)^2 / sum w^2."""
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0 or np.any(w < 0):
        raise EstimationError("weights must be nonnegative and nonempty")
    s2 = float(np.dot(w, w))
    if s2 == 0.0:
        raise EstimationError("all weights are zero")
    return float(w.sum()) ** 2 / s2


@dataclass
class BalanceReport:
    """Plot-ready balance summary for one weighting (or the unweighted baseline)."""

    feature_names: list[str]
    clusters: list[str]
    smd_global: np.ndarray
    smd_local: np.ndarray
    l2_global: float
    l2_local: float
    ess_control: float
    weighted: bool
    pbr_global: float | None = None
    pbr_local: float | None = None
    n_missing_local: int = 0
    zero_sd_features: list[str] = field(default_factory=list)

    def rows(self):
        """Long-format rows: (block, cluster, feature, smd)."""
        out = []
        for j, name in enumerate(self.feature_names):
            v = self.smd_global[j]
            out.append(("global", "", name, v))
        for k, lab in enumerate(self.clusters):
            for j, name in enumerate(self.feature_names):
                v = self.smd_local[k, j]
                if not np.isnan(v):
                    out.append(("local", lab, name, v))
        return out

    def summary(self):
        return {
            "weighted": self.weighted,
            "l2_global": self.l2_global,
            "l2_local": self.l2_local,
            "pbr_global": self.pbr_global,
            "pbr_local": self.pbr_local,
            "ess_control": self.ess_control,
            "n_missing_local": self.n_missing_local,
            "zero_sd_features": self.zero_sd_features,
        }


def balance_report(ds, feature_matrix, feature_names=None, weights=None):
    """Compute a BalanceReport; PBR is filled in relative to the unweighted run."""
    F = np.asarray(feature_matrix, dtype=float)
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(F.shape[1])]
    sg, sl, zero_idx, n_missing = smd(ds, F, weights)
    l2g, l2l = l2_aggregate(sg, sl)
    ctl = ds.z == 0
    if weights is None:
        ess_c = ess(np.ones(int(ctl.sum())))
        pg = pl = None
        weighted = False
    else:
        w = np.asarray(weights, dtype=float)
        ess_c = ess(w[ctl])
        sg0, sl0, _, _ = smd(ds, F, None)
        l2g0, l2l0 = l2_aggregate(sg0, sl0)
        pg = pbr(l2g0, l2g)
        pl = pbr(l2l0, l2l) if np.isfinite(l2l0) and np.isfinite(l2l) else None
        weighted = True
    return BalanceReport(
        feature_names=list(feature_names),
        clusters=list(ds.clusters),
        smd_global=sg,
        smd_local=sl,
        l2_global=l2g,
        l2_local=l2l,
        ess_control=ess_c,
        weighted=weighted,
        pbr_global=pg,
        pbr_local=pl,
        n_missing_local=n_missing,
        zero_sd_features=[feature_names[j] for j in zero_idx],
    )
