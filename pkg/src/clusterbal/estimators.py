"""Weighting estimators for the ATT in clustered data.

Five methods, all producing nonnegative control-unit weights (treated units
carry weight 1):

* ``standard-bw``      exact global balance, minimal weight dispersion,
                       no cluster adjustment;
* ``ri-ipw``           plug-in logistic weights with ridge-penalized
                       per-cluster intercepts;
* ``hierarchical-bw``  minimize within-cluster imbalance subject to exact
                       global balance and per-cluster average-to-one;
* ``mundlak-gb``       balance cluster-level sufficient statistics exactly and
                       minimize pooled interaction imbalance;
* ``mundlak-avto``     like mundlak-gb but with per-cluster average-to-one in
                       place of the sufficient-statistic constraint.

The classes follow the scikit-learn estimator API: hyperparameters in
``__init__``, ``fit`` / ``get_params`` / ``set_params``, fitted attributes with
trailing underscores.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import inference
from .data import Dataset
from .diagnostics import balance_report
from .errors import (
    EstimationError,
    InfeasibleBalanceError,
    SeparationError,
)
from .features import build_feature_set, default_feature_spec
from .qp import INFEASIBLE, OPTIMAL, ObjectiveBlock, QpProblem, SolveOptions, solve

METHODS = ("standard-bw", "ri-ipw", "hierarchical-bw", "mundlak-gb", "mundlak-avto")

PENALTY_BLOCK_WEIGHT = 1e6
EQ_TOL = 1e-8


@dataclass(frozen=True)
class BalanceModelClass:
    """Coefficient bounds for the worst-case bias bound (reporting only)."""

    global_bound: float = 1.0
    local_bound: float = 1.0

    def __post_init__(self):
        if self.global_bound <= 0 or self.local_bound <= 0:
            raise EstimationError("coefficient bounds must be positive")


@dataclass
class WeightSolution:
    """Control-unit weights plus solver status and achieved imbalances."""

    gamma: np.ndarray  # one weight per control unit, in control row order
    method: str
    solver_meta: dict
    global_imbalance: np.ndarray  # per unit-feature coordinate, 1/n1-scaled
    local_imbalance: dict | None = None  # cluster -> 1/n1g-scaled vector
    stat_imbalance: np.ndarray | None = None  # cluster-stat coordinates (mundlak)
    avg_to_one_residual: dict | None = None  # cluster -> residual of the constraint
    flags: dict = field(default_factory=dict)

    @property
    def sum_gamma(self):
        return float(self.gamma.sum())

    @property
    def implied_propensity(self):
        return self.gamma / (1.0 + self.gamma)


def select_ridge_penalty(ds, feature_matrix):
    """Data-driven ridge value: residual variance of the control-arm outcome
    regressed on the unit features."""
    y = ds.require_outcome()
    ctl = ds.z == 0
    X = np.column_stack([np.ones(int(ctl.sum())), feature_matrix[ctl]])
    beta, *_ = np.linalg.lstsq(X, y[ctl], rcond=None)
    resid = y[ctl] - X @ beta
    return float(np.var(resid))


def _control_blocks(ds, F):
    ctl_idx = np.flatnonzero(ds.z == 0)
    trt_idx = np.flatnonzero(ds.z == 1)
    return ctl_idx, trt_idx, F[ctl_idx], F[trt_idx]


def _global_balance_rows(ds, F):
    """Mean-form rows: (1/n1) sum_ctl g*f_j = (1/n1) sum_trt f_j."""
    ctl_idx, trt_idx, Fc, Ft = _control_blocks(ds, F)
    A = Fc.T / ds.n1
    b = Ft.sum(axis=0) / ds.n1
    return A, b


def _intercept_row(ds):
    n0 = ds.n0
    return np.full((1, n0), 1.0 / ds.n1), np.array([1.0])


def _avg_to_one_rows(ds):
    """One row per cluster: (1/n1g) sum of that cluster's control weights = 1."""
    ctl_idx = np.flatnonzero(ds.z == 0)
    codes_ctl = ds.cluster_codes[ctl_idx]
    K = ds.n_clusters
    A = np.zeros((K, ctl_idx.size))
    for k in range(K):
        A[k, codes_ctl == k] = 1.0 / ds.n1_g[k]
    return A, np.ones(K)


def _stat_balance_rows(ds, features):
    sb = features.unit_cluster_stats(ds)
    return _global_balance_rows(ds, sb)


def _require_nondegenerate(ds, method):
    if np.any(ds.n1_g == 0) or np.any(ds.n0_g == 0):
        bad = [
            ds.clusters[k]
            for k in range(ds.n_clusters)
            if ds.n1_g[k] == 0 or ds.n0_g[k] == 0
        ]
        raise EstimationError(
            f"{method} requires every cluster to have both arms; "
            f"run filter_degenerate_clusters first (offending clusters: {bad[:5]}"
            f"{'...' if len(bad) > 5 else ''})"
        )


def _achieved_imbalances(ds, features, gamma):
    ctl_idx = np.flatnonzero(ds.z == 0)
    trt_idx = np.flatnonzero(ds.z == 1)
    F = features.unit_features
    glob = (gamma @ F[ctl_idx] - F[trt_idx].sum(axis=0)) / ds.n1
    local = {}
    avto = {}
    codes_ctl = ds.cluster_codes[ctl_idx]
    codes_trt = ds.cluster_codes[trt_idx]
    for k, lab in enumerate(ds.clusters):
        n1g = ds.n1_g[k]
        if n1g == 0:
            continue
        sel_c = codes_ctl == k
        sel_t = codes_trt == k
        gk = gamma[sel_c]
        local[lab] = (gk @ F[ctl_idx[sel_c]] - F[trt_idx[sel_t]].sum(axis=0)) / n1g
        avto[lab] = float(gk.sum() / n1g - 1.0)
    sb = features.unit_cluster_stats(ds)
    stat = (gamma @ sb[ctl_idx] - sb[trt_idx].sum(axis=0)) / ds.n1
    return glob, local, stat, avto


def _solve_balance_qp(ds, features, blocks, ridge, A, b, var_groups, method,
                      hard_rows, infeasible="error", solve_options=None):
    """Solve, verify the posed constraints, optionally fall back to penalties.

    ``hard_rows`` is a boolean mask over A's rows marking constraints that stay
    hard in the penalty fallback (average-to-one / intercept rows).
    """
    opts = solve_options or SolveOptions()
    problem = QpProblem(
        var_count=ds.n0, blocks=blocks, ridge=ridge, A=A, b=b,
        nonneg=True, var_groups=var_groups,
    )
    sol = solve(problem, opts)
    flags = {}
    if sol.status == INFEASIBLE:
        violations = np.abs(A @ sol.gamma - b)
        if infeasible != "penalty":
            raise InfeasibleBalanceError(
                f"{method}: exact balance constraints are infeasible "
                f"(certificate residual {sol.infeasibility}); enable the "
                f"penalty fallback to soften them",
                violations=violations,
            )
        soft = ~hard_rows
        blocks = list(blocks) + [
            ObjectiveBlock(A[soft], b[soft], PENALTY_BLOCK_WEIGHT)
        ]
        problem = QpProblem(
            var_count=ds.n0, blocks=blocks, ridge=ridge,
            A=A[hard_rows], b=b[hard_rows], nonneg=True, var_groups=var_groups,
        )
        sol = solve(problem, opts)
        flags["penalty_fallback"] = True
        if sol.status != OPTIMAL:
            raise EstimationError(f"{method}: solver failed after penalty fallback")
    elif sol.status != OPTIMAL:
        if sol.primal_residual <= EQ_TOL:
            flags["max_iter"] = True
        else:
            raise EstimationError(
                f"{method}: solver did not converge (status {sol.status}, "
                f"primal residual {sol.primal_residual:.2e})"
            )
    if "penalty_fallback" not in flags and sol.primal_residual > EQ_TOL:
        raise EstimationError(
            f"{method}: constraint residual {sol.primal_residual:.2e} exceeds {EQ_TOL}"
        )
    meta = {
        "status": sol.status,
        "iterations": sol.iterations,
        "primal_residual": sol.primal_residual,
        "kkt_residual": sol.kkt_residual,
        "objective_value": sol.objective_value,
        "polished": sol.polished,
    }
    return sol, meta, flags


class _ParamsMixin:
    """get_params / set_params via __init__ introspection (sklearn contract)."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


class BaseWeightingEstimator(_ParamsMixin):
    method = None

    def fit(self, X, z, groups=None, y=None):
        """Fit from arrays: covariates, binary treatment, cluster labels, outcome."""
        ds = Dataset(X, z, groups, y=y)
        return self.fit_dataset(ds)

    def fit_dataset(self, ds, feature_set=None):
        spec = self.features if self.features is not None else default_feature_spec(ds)
        if feature_set is None:
            feature_set = build_feature_set(
                ds, spec, with_interactions=self._needs_interactions()
            )
        self.dataset_ = ds
        self.feature_spec_ = spec
        self.feature_set_ = feature_set
        self.solution_ = self._compute(ds, feature_set)
        self.gamma_ = self.solution_.gamma
        w = np.ones(ds.n)
        w[ds.z == 0] = self.gamma_
        self.weights_ = w
        self.implied_propensity_ = self.solution_.implied_propensity
        return self

    def _needs_interactions(self):
        return False

    def _resolve_lam(self, ds, features):
        lam = getattr(self, "lam", 0.0)
        if isinstance(lam, str):
            if lam != "auto":
                raise EstimationError(f"lam must be a number or 'auto', got {lam!r}")
            lam = select_ridge_penalty(ds, features.unit_features)
        lam = float(lam)
        if lam < 0:
            raise EstimationError("lam must be nonnegative")
        self.lam_ = lam
        return lam

    def _check_fitted(self):
        if not hasattr(self, "solution_"):
            raise EstimationError("estimator is not fitted")

    def estimate(self, alpha=0.05, outcome_model=None, bias_correction=False):
        """EffectEstimate (ATT, RVE variance, normal interval) from the fit."""
        self._check_fitted()
        return inference.estimate_effect(
            self.dataset_, self.feature_set_, self.solution_,
            alpha=alpha, outcome_model=outcome_model,
            bias_correction=bias_correction,
        )

    def balance(self):
        """Weighted balance report on the unit features."""
        self._check_fitted()
        return balance_report(
            self.dataset_,
            self.feature_set_.unit_features,
            self.feature_set_.unit_feature_names,
            weights=self.weights_,
        )


class StandardBalancingWeights(BaseWeightingEstimator):
    """Exact global balance with minimal weight dispersion; clusters ignored."""

    method = "standard-bw"

    def __init__(self, features=None, lam="auto", infeasible="error"):
        self.features = features
        self.lam = lam
        self.infeasible = infeasible

    def _compute(self, ds, features):
        lam = self._resolve_lam(ds, features)
        F = features.unit_features
        Ai, bi = _intercept_row(ds)
        Ag, bg = _global_balance_rows(ds, F)
        A = np.vstack([Ai, Ag])
        b = np.concatenate([bi, bg])
        hard = np.zeros(A.shape[0], dtype=bool)
        hard[0] = True
        ridge = np.full(ds.n0, lam / ds.n1**2)
        sol, meta, flags = _solve_balance_qp(
            ds, features, [], ridge, A, b, None, self.method, hard,
            infeasible=self.infeasible,
        )
        glob, local, stat, avto = _achieved_imbalances(ds, features, sol.gamma)
        return WeightSolution(
            gamma=sol.gamma, method=self.method, solver_meta=meta,
            global_imbalance=glob, local_imbalance=local, stat_imbalance=stat,
            avg_to_one_residual=avto, flags=flags,
        )


class HierarchicalBalancingWeights(BaseWeightingEstimator):
    """Minimize within-cluster imbalance under exact global balance and
    per-cluster average-to-one constraints. Requires both arms in every
    cluster."""

    method = "hierarchical-bw"

    def __init__(self, features=None, lam="auto", infeasible="error"):
        self.features = features
        self.lam = lam
        self.infeasible = infeasible

    def _compute(self, ds, features):
        _require_nondegenerate(ds, self.method)
        lam = self._resolve_lam(ds, features)
        F = features.unit_features
        ctl_idx = np.flatnonzero(ds.z == 0)
        trt_idx = np.flatnonzero(ds.z == 1)
        codes_ctl = ds.cluster_codes[ctl_idx]
        codes_trt = ds.cluster_codes[trt_idx]

        blocks = []
        groups = []
        ridge = np.zeros(ds.n0)
        for k in range(ds.n_clusters):
            sel_c = np.flatnonzero(codes_ctl == k)
            n1g = float(ds.n1_g[k])
            design = np.zeros((F.shape[1], ds.n0))
            design[:, sel_c] = F[ctl_idx[sel_c]].T / n1g
            target = F[trt_idx[codes_trt == k]].sum(axis=0) / n1g
            blocks.append(ObjectiveBlock(design, target, 1.0))
            groups.append(sel_c)
            ridge[sel_c] = lam / n1g**2

        Aa, ba = _avg_to_one_rows(ds)
        Ag, bg = _global_balance_rows(ds, F)
        A = np.vstack([Aa, Ag])
        b = np.concatenate([ba, bg])
        hard = np.zeros(A.shape[0], dtype=bool)
        hard[: Aa.shape[0]] = True
        sol, meta, flags = _solve_balance_qp(
            ds, features, blocks, ridge, A, b, groups, self.method, hard,
            infeasible=self.infeasible,
        )
        glob, local, stat, avto = _achieved_imbalances(ds, features, sol.gamma)
        return WeightSolution(
            gamma=sol.gamma, method=self.method, solver_meta=meta,
            global_imbalance=glob, local_imbalance=local, stat_imbalance=stat,
            avg_to_one_residual=avto, flags=flags,
        )


class MundlakBalancingWeights(BaseWeightingEstimator):
    """Balance unit features exactly, adjust for clusters through their
    sufficient statistics, and minimize pooled interaction imbalance.

    variant="gb" constrains exact balance on the cluster statistics (works
    with clusters missing an arm); variant="avto" instead constrains weights
    to average to one within each cluster (requires both arms everywhere).
    """

    method = "mundlak-gb"

    def __init__(self, features=None, lam="auto", variant="gb", infeasible="error"):
        self.features = features
        self.lam = lam
        self.variant = variant
        self.infeasible = infeasible

    def _needs_interactions(self):
        return True

    def _compute(self, ds, features):
        if self.variant not in ("gb", "avto"):
            raise EstimationError(f"variant must be 'gb' or 'avto', got {self.variant!r}")
        method = "mundlak-gb" if self.variant == "gb" else "mundlak-avto"
        if self.variant == "avto":
            _require_nondegenerate(ds, method)
        if features.interactions is None:
            raise EstimationError("mundlak weights need the interaction block")
        lam = self._resolve_lam(ds, features)

        psi = features.interactions
        ctl_idx = np.flatnonzero(ds.z == 0)
        trt_idx = np.flatnonzero(ds.z == 1)
        design = psi[ctl_idx].T / ds.n1
        target = psi[trt_idx].sum(axis=0) / ds.n1
        blocks = [ObjectiveBlock(design, target, 1.0)]
        ridge = np.full(ds.n0, lam / ds.n1**2)

        Ai, bi = _intercept_row(ds)
        Ag, bg = _global_balance_rows(ds, features.unit_features)
        if self.variant == "gb":
            As, bs = _stat_balance_rows(ds, features)
            A = np.vstack([Ai, Ag, As])
            b = np.concatenate([bi, bg, bs])
            hard = np.zeros(A.shape[0], dtype=bool)
            hard[0] = True
        else:
            Aa, ba = _avg_to_one_rows(ds)
            A = np.vstack([Ai, Aa, Ag])
            b = np.concatenate([bi, ba, bg])
            hard = np.zeros(A.shape[0], dtype=bool)
            hard[: 1 + Aa.shape[0]] = True
        sol, meta, flags = _solve_balance_qp(
            ds, features, blocks, ridge, A, b, None, method, hard,
            infeasible=self.infeasible,
        )
        glob, local, stat, avto = _achieved_imbalances(ds, features, sol.gamma)
        return WeightSolution(
            gamma=sol.gamma, method=method, solver_meta=meta,
            global_imbalance=glob, local_imbalance=local, stat_imbalance=stat,
            avg_to_one_residual=avto, flags=flags,
        )


class RandomInterceptIPW(BaseWeightingEstimator):
    """Plug-in inverse propensity weights from a logistic model with
    ridge-penalized per-cluster intercepts.

    The intercept penalty variance is estimated by a fixed-point loop:
    refit, then set it to the mean squared intercept plus the mean approximate
    posterior variance, until the change drops below ``tol``. With
    ``standardize_within_cluster`` (default), control weights are rescaled so
    they average to one within every cluster that has treated units; clusters
    without treated units receive the global rescale factor instead.
    """

    method = "ri-ipw"

    def __init__(self, features=None, standardize_within_cluster=True,
                 max_outer=50, tol=1e-6, max_newton=100):
        self.features = features
        self.standardize_within_cluster = standardize_within_cluster
        self.max_outer = max_outer
        self.tol = tol
        self.max_newton = max_newton

    def _compute(self, ds, features):
        e, meta = _fit_random_intercept_logit(
            ds, features.unit_features,
            max_outer=self.max_outer, tol=self.tol, max_newton=self.max_newton,
        )
        ctl_idx = np.flatnonzero(ds.z == 0)
        e_ctl = np.clip(e[ctl_idx], 1e-12, 1.0 - 1e-12)
        gamma = e_ctl / (1.0 - e_ctl)
        flags = {}
        if self.standardize_within_cluster:
            codes_ctl = ds.cluster_codes[ctl_idx]
            total = float(gamma.sum())
            global_factor = ds.n1 / total if total > 0 else 1.0
            rescaled_globally = []
            for k, lab in enumerate(ds.clusters):
                sel = codes_ctl == k
                if not np.any(sel):
                    continue
                if ds.n1_g[k] > 0:
                    s = float(gamma[sel].sum())
                    if s <= 0:
                        raise EstimationError(
                            f"ri-ipw: zero weight mass in cluster {lab}"
                        )
                    gamma[sel] *= ds.n1_g[k] / s
                else:
                    gamma[sel] *= global_factor
                    rescaled_globally.append(lab)
            flags["standardized_within_cluster"] = True
            if rescaled_globally:
                flags["globally_rescaled_clusters"] = rescaled_globally
        glob, local, stat, avto = _achieved_imbalances(ds, features, gamma)
        return WeightSolution(
            gamma=gamma, method=self.method, solver_meta=meta,
            global_imbalance=glob, local_imbalance=local, stat_imbalance=stat,
            avg_to_one_residual=avto, flags=flags,
        )


def _fit_random_intercept_logit(ds, F, max_outer=50, tol=1e-6, max_newton=100,
                                grad_tol=1e-8):
    """Penalized logistic fit with per-cluster intercepts via damped Newton.

    The cluster block of the Hessian is diagonal, so each Newton step reduces
    to a dense solve in the slope coordinates only.
    """
    n = ds.n
    Phi = np.column_stack([np.ones(n), F])
    d = Phi.shape[1]
    codes = ds.cluster_codes
    K = ds.n_clusters
    z = ds.z.astype(float)

    theta = np.zeros(d)
    alpha = np.zeros(K)
    sigma2 = 1.0

    def nll(theta, alpha, sigma2):
        eta = Phi @ theta + alpha[codes]
        return float(np.sum(np.logaddexp(0.0, eta) - z * eta)
                     + np.sum(alpha**2) / (2.0 * sigma2))

    total_newton = 0
    converged_outer = False
    grad_norm = np.inf
    W = np.full(n, 0.25)
    for outer in range(max_outer):
        # inner damped Newton at fixed sigma2
        current = nll(theta, alpha, sigma2)
        for _ in range(max_newton):
            total_newton += 1
            eta = Phi @ theta + alpha[codes]
            p = expit(eta)
            W = p * (1.0 - p)
            g_theta = Phi.T @ (p - z)
            g_alpha = np.bincount(codes, weights=p - z, minlength=K) + alpha / sigma2
            grad_norm = max(
                float(np.max(np.abs(g_theta))), float(np.max(np.abs(g_alpha)))
            )
            if grad_norm < grad_tol:
                break
            if float(np.max(np.abs(theta))) > 1e4:
                raise SeparationError(
                    "ri-ipw logistic fit diverged (complete separation); "
                    "reduce the feature set or increase the penalty"
                )
            Htt = Phi.T @ (W[:, None] * Phi)
            Hta = np.column_stack(
                [np.bincount(codes, weights=W * Phi[:, j], minlength=K)
                 for j in range(d)]
            )  # (K, d)
            Da = np.bincount(codes, weights=W, minlength=K) + 1.0 / sigma2
            S = Htt - Hta.T @ (Hta / Da[:, None])
            rhs = g_theta - Hta.T @ (g_alpha / Da)
            try:
                dtheta = np.linalg.solve(S + 1e-12 * np.eye(d), rhs)
            except np.linalg.LinAlgError:
                raise SeparationError(
                    "ri-ipw logistic fit is singular; features may be aliased"
                ) from None
            dalpha = (g_alpha - Hta @ dtheta) / Da
            step = 1.0
            for _half in range(40):
                cand = nll(theta - step * dtheta, alpha - step * dalpha, sigma2)
                if cand <= current + 1e-12 * max(1.0, abs(current)):
                    break
                step *= 0.5
            else:
                break  # no descent possible; gradient is as good as it gets
            theta = theta - step * dtheta
            alpha = alpha - step * dalpha
            current = cand

        fisher_alpha = np.bincount(codes, weights=W, minlength=K) + 1.0 / sigma2
        sigma2_new = float(np.mean(alpha**2) + np.mean(1.0 / fisher_alpha))
        sigma2_new = max(sigma2_new, 1e-10)
        if abs(sigma2_new - sigma2) < tol:
            sigma2 = sigma2_new
            converged_outer = True
            break
        sigma2 = sigma2_new

    eta = Phi @ theta + alpha[codes]
    e = expit(eta)
    meta = {
        "converged": bool(converged_outer and grad_norm < 1e-4),
        "outer_iterations": outer + 1,
        "newton_iterations": total_newton,
        "sigma2": sigma2,
        "grad_norm": grad_norm,
        "cluster_intercepts": {lab: float(alpha[k]) for k, lab in enumerate(ds.clusters)},
    }
    return e, meta


def worst_case_bias_bound(ds, features, gamma, model_class=None):
    """Worst-case linear-model bias: B * ||global imbalance|| plus the
    treated-share-weighted sum of D * ||local imbalance||.

    Clusters without treated units enter through their raw weighted-control
    term (the treated-share weighting cancels the per-cluster scaling).
    """
    mc = model_class or BalanceModelClass()
    F = features.unit_features
    ctl_idx = np.flatnonzero(ds.z == 0)
    trt_idx = np.flatnonzero(ds.z == 1)
    codes_ctl = ds.cluster_codes[ctl_idx]
    codes_trt = ds.cluster_codes[trt_idx]
    glob = (gamma @ F[ctl_idx] - F[trt_idx].sum(axis=0)) / ds.n1
    total = mc.global_bound * float(np.linalg.norm(glob))
    for k in range(ds.n_clusters):
        sel_c = codes_ctl == k
        sel_t = codes_trt == k
        diff = (gamma[sel_c] @ F[ctl_idx[sel_c]] - F[trt_idx[sel_t]].sum(axis=0)) / ds.n1
        total += mc.local_bound * float(np.linalg.norm(diff))
    return total


_REGISTRY = {
    "standard-bw": StandardBalancingWeights,
    "ri-ipw": RandomInterceptIPW,
    "hierarchical-bw": HierarchicalBalancingWeights,
    "mundlak-gb": lambda **kw: MundlakBalancingWeights(variant="gb", **kw),
    "mundlak-avto": lambda **kw: MundlakBalancingWeights(variant="avto", **kw),
}


def make_estimator(method, **options):
    """Instantiate an estimator by its method name."""
    if method not in _REGISTRY:
        raise EstimationError(f"unknown estimator {method!r}; expected one of {METHODS}")
    return _REGISTRY[method](**options)
