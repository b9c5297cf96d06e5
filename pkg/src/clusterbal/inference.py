"""ATT point estimates, bias correction, residualized variance, confidence intervals."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .diagnostics import ess
from .errors import EstimationError

OUTCOME_MODELS = ("x-only", "x-fe", "x-stats", "x-stats-fe")

# Covariate set matching each method's identification assumption.
DEFAULT_OUTCOME_MODEL = {
    "standard-bw": "x-only",
    "ri-ipw": "x-fe",
    "hierarchical-bw": "x-fe",
    "mundlak-gb": "x-stats",
    "mundlak-avto": "x-stats-fe",
}


@dataclass
class EffectEstimate:
    mu1: float
    mu0: float
    att: float
    v1: float
    v0: float
    ci_low: float
    ci_high: float
    alpha: float
    bias_corrected: bool
    outcome_model_spec: str
    ess_control: float
    hajek_normalized: bool = False
    v0_population_addon: float = 0.0
    fe_filled_clusters: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mu1": self.mu1,
            "mu0": self.mu0,
            "att": self.att,
            "v1": self.v1,
            "v0": self.v0,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "alpha": self.alpha,
            "bias_corrected": self.bias_corrected,
            "outcome_model_spec": self.outcome_model_spec,
            "ess_control": self.ess_control,
            "hajek_normalized": self.hajek_normalized,
            "v0_population_addon": self.v0_population_addon,
            "fe_filled_clusters": list(self.fe_filled_clusters),
        }


@dataclass
class OutcomeModel:
    m_hat: np.ndarray
    assumption: str
    dropped_columns: list[str]
    fe_filled_clusters: list[str]


def normalize_weights(gamma, n1, tol=1e-6):
    """Rescale control weights so they sum to n1 when they drift beyond tol."""
    gamma = np.asarray(gamma, dtype=float)
    s = float(gamma.sum())
    if s <= 0:
        raise EstimationError("control weights sum to zero; cannot normalize")
    if abs(s - n1) <= tol * n1:
        return gamma, False
    return gamma * (n1 / s), True


def att_estimate(ds, gamma):
    """Plain weighting estimator: (mu1, mu0, att, hajek_flag).

    ``gamma`` holds one weight per control unit, in control order.
    """
    y = ds.require_outcome()
    if ds.n1 == 0:
        raise EstimationError("no treated units")
    g, hajek = normalize_weights(gamma, ds.n1)
    mu1 = float(y[ds.z == 1].mean())
    mu0 = float(g @ y[ds.z == 0]) / ds.n1
    return mu1, mu0, mu1 - mu0, hajek


def _greedy_rank_filter(X, tol=1e-10):
    """Keep columns left to right, dropping any in the span of earlier ones."""
    n, c = X.shape
    Q = np.zeros((n, 0))
    kept = []
    for j in range(c):
        col = X[:, j]
        r = col - Q @ (Q.T @ col)
        r = r - Q @ (Q.T @ r)
        nrm = np.linalg.norm(r)
        if nrm > tol * max(1.0, np.linalg.norm(col)):
            kept.append(j)
            Q = np.column_stack([Q, r / nrm])
    return kept


def _design(ds, features, assumption):
    F = features.unit_features
    names = list(features.unit_feature_names)
    cols, colnames = [], []
    fe_start = None
    if assumption == "x-only":
        cols = [np.ones(ds.n)] + [F[:, j] for j in range(F.shape[1])]
        colnames = ["(intercept)"] + names
    elif assumption == "x-fe":
        fe_start = 0
        for k, lab in enumerate(ds.clusters):
            cols.append((ds.cluster_codes == k).astype(float))
            colnames.append(f"fe[{lab}]")
        cols += [F[:, j] for j in range(F.shape[1])]
        colnames += names
    elif assumption == "x-stats":
        sb = features.unit_cluster_stats(ds)
        cols = [np.ones(ds.n)] + [F[:, j] for j in range(F.shape[1])]
        colnames = ["(intercept)"] + names
        cols += [sb[:, k] for k in range(sb.shape[1])]
        colnames += list(features.cluster_stat_names)
    elif assumption == "x-stats-fe":
        sb = features.unit_cluster_stats(ds)
        cols = [F[:, j] for j in range(F.shape[1])]
        colnames = names[:]
        cols += [sb[:, k] for k in range(sb.shape[1])]
        colnames += list(features.cluster_stat_names)
        fe_start = len(cols)
        for k, lab in enumerate(ds.clusters):
            cols.append((ds.cluster_codes == k).astype(float))
            colnames.append(f"fe[{lab}]")
    else:
        raise EstimationError(
            f"unknown outcome model {assumption!r}; expected one of {OUTCOME_MODELS}"
        )
    return np.column_stack(cols), colnames, fe_start


def fit_outcome_model(ds, features, assumption="x-only"):
    """Least-squares fit of the control-arm outcome, predicted for every unit.

    Aliased columns are dropped deterministically in column order. Cluster
    fixed effects for clusters with no control units cannot be estimated;
    those predictions use the mean of the estimated fixed effects and the
    cluster labels are reported in ``fe_filled_clusters``.
    """
    y = ds.require_outcome()
    X, colnames, fe_start = _design(ds, features, assumption)
    ctl = ds.z == 0
    Xc = X[ctl]
    kept = _greedy_rank_filter(Xc)
    dropped = [colnames[j] for j in range(X.shape[1]) if j not in set(kept)]
    beta, *_ = np.linalg.lstsq(Xc[:, kept], y[ctl], rcond=None)
    m_hat = X[:, kept] @ beta

    fe_filled = []
    if fe_start is not None:
        kept_set = set(kept)
        fe_cols = {}
        for k, lab in enumerate(ds.clusters):
            j = fe_start + k
            if j in kept_set:
                fe_cols[k] = beta[kept.index(j)]
        if fe_cols:
            fe_mean = float(np.mean(list(fe_cols.values())))
        else:
            fe_mean = 0.0
        for k, lab in enumerate(ds.clusters):
            if ds.n0_g[k] == 0:
                rows = ds.cluster_index[lab]
                m_hat[rows] += fe_mean
                fe_filled.append(lab)
    if dropped:
        warnings.warn(
            f"outcome model dropped aliased columns: {dropped}", UserWarning
        )
    return OutcomeModel(m_hat, assumption, dropped, fe_filled)


def bias_corrected_mu0(ds, gamma, m_hat):
    """mu0 with outcome-model correction: treated predictions plus weighted residuals."""
    y = ds.require_outcome()
    g, hajek = normalize_weights(gamma, ds.n1)
    trt = ds.z == 1
    ctl = ~trt
    val = float(m_hat[trt].sum() + g @ (y[ctl] - m_hat[ctl])) / ds.n1
    return val, hajek


def rve_variance(ds, gamma, m_hat, mu0=None):
    """Residualized variance estimator.

    v1 is the usual variance of the treated mean. v0 weights the squared
    outcome-model residuals with the squared weights, normalized by the squared
    weight sum so that rescaling all weights leaves it unchanged. A separate
    population add-on term is returned; it is excluded from default intervals.
    """
    y = ds.require_outcome()
    trt = ds.z == 1
    ctl = ~trt
    g = np.asarray(gamma, dtype=float)
    yt = y[trt]
    mu1 = yt.mean()
    v1 = float(np.sum((yt - mu1) ** 2)) / (ds.n1**2)
    sw = float(g.sum())
    if sw <= 0:
        raise EstimationError("control weights sum to zero")
    v0 = float(np.sum(g**2 * (y[ctl] - m_hat[ctl]) ** 2)) / (sw**2)
    addon = 0.0
    if mu0 is not None:
        addon = float(np.sum((m_hat[trt] - mu0) ** 2)) / (ds.n1**2)
    return v1, v0, addon


def confidence_interval(att, v1, v0, alpha=0.05):
    """Symmetric normal interval; no clustering correction is applied."""
    if v1 + v0 < 0:
        raise EstimationError("negative variance")
    z = float(ndtri(1.0 - alpha / 2.0))
    half = z * float(np.sqrt(v1 + v0))
    return att - half, att + half


def estimate_effect(ds, features, solution, alpha=0.05, outcome_model=None,
                    bias_correction=False):
    """Full pipeline from a weight solution to an EffectEstimate."""
    assumption = outcome_model or DEFAULT_OUTCOME_MODEL.get(solution.method, "x-only")
    om = fit_outcome_model(ds, features, assumption)
    mu1, mu0_plain, _, hajek = att_estimate(ds, solution.gamma)
    if bias_correction:
        mu0, hajek_bc = bias_corrected_mu0(ds, solution.gamma, om.m_hat)
        hajek = hajek or hajek_bc
    else:
        mu0 = mu0_plain
    att = mu1 - mu0
    g, _ = normalize_weights(solution.gamma, ds.n1)
    v1, v0, addon = rve_variance(ds, g, om.m_hat, mu0=mu0)
    lo, hi = confidence_interval(att, v1, v0, alpha)
    return EffectEstimate(
        mu1=mu1,
        mu0=mu0,
        att=att,
        v1=v1,
        v0=v0,
        ci_low=lo,
        ci_high=hi,
        alpha=alpha,
        bias_corrected=bias_correction,
        outcome_model_spec=assumption,
        ess_control=ess(g),
        hajek_normalized=hajek,
        v0_population_addon=addon,
        fe_filled_clusters=om.fe_filled_clusters,
    )
