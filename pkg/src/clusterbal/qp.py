"""Structured convex quadratic program solver for balancing-weight problems.

Problem form:

    minimize    sum_b w_b * ||M_b g - t_b||^2  +  sum_i r_i g_i^2
    subject to  A g = b,    g >= 0 (optional)

The solver runs operator splitting (ADMM): equality constraints are handled
exactly inside the x-update through a cached factorization of the KKT system,
nonnegativity by projection, and an active-set refinement polishes the
solution to high accuracy once the iteration has converged. The Hessian
factorization exploits structure: dense per-group blocks (clusters) plus a
low-rank global term handled by the Woodbury identity, on top of a diagonal
ridge. Everything is deterministic: identical inputs produce bit-identical
iterates and iteration counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

from .errors import SolverInputError

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


@dataclass
class ObjectiveBlock:
    """Contributes weight * ||design @ g - target||^2 to the objective."""

    design: np.ndarray  # (k, n)
    target: np.ndarray  # (k,)
    weight: float = 1.0


@dataclass
class QpProblem:
    var_count: int
    blocks: list = field(default_factory=list)
    ridge: float | np.ndarray = 0.0
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    nonneg: bool = True
    # Optional factorization hint: disjoint variable-index groups such that
    # some objective blocks touch only one group (e.g. per-cluster blocks).
    var_groups: list | None = None

    def ridge_vector(self):
        r = np.asarray(self.ridge, dtype=float)
        if r.ndim == 0:
            r = np.full(self.var_count, float(r))
        if r.shape != (self.var_count,):
            raise SolverInputError(f"ridge must be scalar or length {self.var_count}")
        return r


@dataclass
class SolveOptions:
    eq_tol: float = 1e-8
    stat_tol: float = 1e-6
    max_iter: int = 100_000
    check_every: int = 25
    rho: float | None = None
    over_relax: float = 1.6
    adapt_every: int = 50
    polish: bool = True


@dataclass
class QpSolution:
    gamma: np.ndarray
    status: str
    primal_residual: float
    kkt_residual: float
    comp_residual: float
    objective_value: float
    iterations: int
    eq_dual: np.ndarray
    bound_dual: np.ndarray
    polished: bool = False
    infeasibility: float | None = None


@dataclass
class KktReport:
    stationarity: float
    primal: float
    dual_feasibility: float  # min multiplier; should be >= -tol
    complementarity: float
    objective: float


class _Pre:
    """Validated, preprocessed problem: gradient pieces and block classification."""

    def __init__(self, p: QpProblem):
        n = int(p.var_count)
        if n <= 0:
            raise SolverInputError("var_count must be positive")
        self.n = n
        self.ridge = p.ridge_vector()
        if np.any(self.ridge < 0) or not np.all(np.isfinite(self.ridge)):
            raise SolverInputError("ridge must be finite and nonnegative")

        self.blocks = []
        for blk in p.blocks:
            M = np.ascontiguousarray(blk.design, dtype=float)
            t = np.asarray(blk.target, dtype=float).ravel()
            w = float(blk.weight)
            if M.ndim != 2 or M.shape[1] != n or M.shape[0] != t.shape[0]:
                raise SolverInputError(
                    f"objective block has shape {M.shape}, target {t.shape}, n={n}"
                )
            if not (np.all(np.isfinite(M)) and np.all(np.isfinite(t)) and np.isfinite(w)):
                raise SolverInputError("objective block contains non-finite values")
            if w < 0:
                raise SolverInputError("block weights must be nonnegative")
            self.blocks.append((M, t, w))

        self.q = np.zeros(n)
        for M, t, w in self.blocks:
            self.q -= 2.0 * w * (M.T @ t)

        # Classify blocks for the structured factorization.
        owner = np.full(n, -1, dtype=np.int64)
        groups_idx = []
        if p.var_groups:
            for gi, gidx in enumerate(p.var_groups):
                gidx = np.asarray(gidx, dtype=np.int64)
                if np.any(owner[gidx] != -1):
                    raise SolverInputError("var_groups must be disjoint")
                owner[gidx] = gi
                groups_idx.append(gidx)
        local_mats = [[] for _ in groups_idx]
        self.global_blocks = []
        for M, t, w in self.blocks:
            if w == 0.0:
                continue
            nz = np.flatnonzero(np.any(M != 0.0, axis=0))
            if nz.size == 0:
                continue
            gs = np.unique(owner[nz])
            if gs.size == 1 and gs[0] >= 0:
                g = int(gs[0])
                local_mats[g].append((np.ascontiguousarray(M[:, groups_idx[g]]), w))
            else:
                self.global_blocks.append((M, w))
        self.groups = [
            (gidx, mats) for gidx, mats in zip(groups_idx, local_mats)
        ]

        self.diagH = 2.0 * self.ridge.copy()
        for M, t, w in self.blocks:
            self.diagH += 2.0 * w * np.einsum("ij,ij->j", M, M)

    def H_apply(self, g):
        out = 2.0 * self.ridge * g
        for M, t, w in self.blocks:
            if w != 0.0:
                out += (2.0 * w) * (M.T @ (M @ g))
        return out

    def objective(self, g):
        val = float(np.dot(self.ridge * g, g))
        for M, t, w in self.blocks:
            r = M @ g - t
            val += w * float(np.dot(r, r))
        return val


class _HessianFactor:
    """Factorization of (H + tau I) restricted to a free-variable subset."""

    def __init__(self, pre: _Pre, tau: float, free=None):
        n = pre.n
        if free is None:
            free = np.arange(n)
        self.free = free
        nf = free.size
        pos = np.full(n, -1, dtype=np.int64)
        pos[free] = np.arange(nf)
        d = 2.0 * pre.ridge[free] + tau
        self.dinv = 1.0 / d

        entries = []
        for gidx, mats in pre.groups:
            sel = pos[gidx]
            local = np.flatnonzero(sel >= 0)
            if local.size == 0:
                continue
            fpos = sel[local]
            Sg = np.diag(d[fpos])
            for Msub, w in mats:
                Mi = Msub[:, local]
                Sg += (2.0 * w) * (Mi.T @ Mi)
            entries.append((fpos, np.linalg.inv(Sg)))

        self.n_groups = len(entries)
        if entries:
            smax = max(fpos.size for fpos, _ in entries)
            G = len(entries)
            self.pad = np.zeros((G, smax), dtype=np.int64)
            self.msk = np.zeros((G, smax), dtype=bool)
            self.inv = np.zeros((G, smax, smax))
            for gi, (fpos, Si) in enumerate(entries):
                s = fpos.size
                self.pad[gi, :s] = fpos
                self.msk[gi, :s] = True
                self.inv[gi, :s, :s] = Si

        Vparts = [
            np.sqrt(2.0 * w) * M[:, free] for M, w in pre.global_blocks
        ]
        if Vparts:
            V = np.vstack(Vparts)
            T = self._bd_solve(V.T)
            C = np.eye(V.shape[0]) + V @ T
            self.V = V
            self.T = T
            self.Cf = cho_factor(C, lower=True)
        else:
            self.V = None

    def _bd_solve(self, B):
        vec = B.ndim == 1
        if vec:
            B = B[:, None]
        out = B * self.dinv[:, None]
        if self.n_groups:
            Bg = B[self.pad] * self.msk[:, :, None]
            Yg = np.einsum("gij,gjk->gik", self.inv, Bg)
            out[self.pad[self.msk]] = Yg[self.msk]
        return out[:, 0] if vec else out

    def solve(self, B):
        Y = self._bd_solve(B)
        if self.V is not None:
            vec = Y.ndim == 1
            W = self.V @ (Y[:, None] if vec else Y)
            corr = self.T @ cho_solve(self.Cf, W)
            Y = Y - (corr[:, 0] if vec else corr)
        return Y


def _filter_constraint_rows(A, b, tol=1e-10):
    """Drop linearly dependent rows (first-come order kept).

    Returns (A_kept, b_kept, kept_idx, inconsistency) where inconsistency is
    the largest |b| mismatch among the dropped rows; a large value certifies an
    infeasible system regardless of nonnegativity.
    """
    m, n = A.shape
    kept = []
    Q = np.zeros((0, n))
    inconsistency = 0.0
    for i in range(m):
        row = A[i]
        resid = row - Q.T @ (Q @ row)
        resid = resid - Q.T @ (Q @ resid)  # second pass for stability
        nrm = np.linalg.norm(resid)
        if nrm > tol * max(1.0, np.linalg.norm(row)):
            kept.append(i)
            Q = np.vstack([Q, resid / nrm])
        else:
            if kept:
                coef, *_ = np.linalg.lstsq(A[kept].T, row, rcond=None)
                implied = float(coef @ b[kept])
            else:
                implied = 0.0
            inconsistency = max(
                inconsistency, abs(b[i] - implied) / max(1.0, abs(b[i]))
            )
    kept = np.asarray(kept, dtype=np.int64)
    return A[kept], b[kept], kept, inconsistency


class _EqSolver:
    """Cached solve of the equality-constrained proximal step."""

    def __init__(self, pre, A, b, factor):
        self.A = A
        self.b = b
        self.factor = factor
        if A is not None and A.shape[0] > 0:
            self.KiAT = factor.solve(np.ascontiguousarray(A.T))
            S = A @ self.KiAT
            self.Slu = lu_factor(S)
        else:
            self.KiAT = None

    def step(self, rhs):
        """argmin 0.5 x'(H+tau)x - rhs'x  s.t. A x = b; returns (x, nu)."""
        y = self.factor.solve(rhs)
        if self.KiAT is None:
            return y, np.zeros(0)
        nu = lu_solve(self.Slu, self.A @ y - self.b)
        return y - self.KiAT @ nu, nu


def _candidate_report(pre, gamma, nu, mu, A_full, b_full):
    if A_full is not None and A_full.shape[0] > 0:
        prim = float(np.max(np.abs(A_full @ gamma - b_full)))
    else:
        prim = 0.0
    Hg = pre.H_apply(gamma)
    stat_vec = Hg + pre.q - mu
    if nu.size:
        stat_vec = stat_vec + _AkT_nu(pre, nu)
    stat = float(np.max(np.abs(stat_vec))) if stat_vec.size else 0.0
    comp = float(np.max(np.abs(mu * gamma))) if gamma.size else 0.0
    return prim, stat, comp


def _AkT_nu(pre, nu):
    # pre carries the kept constraint matrix for stationarity checks
    return pre.A_kept.T @ nu


def solve(problem: QpProblem, options: SolveOptions | None = None) -> QpSolution:
    """Solve the QP. Deterministic; returns duals alongside the weights.

    status=optimal guarantees: |A g - b| <= eq_tol per row, g >= 0 exactly
    (after projection), and the stationarity/complementarity residuals are
    within stat_tol (up to a max(1, data norm) scale factor).
    """
    opts = options or SolveOptions()
    pre = _Pre(problem)
    n = pre.n

    if problem.A is not None:
        A_full = np.ascontiguousarray(problem.A, dtype=float)
        b_full = np.asarray(problem.b, dtype=float).ravel()
        if A_full.ndim != 2 or A_full.shape[1] != n or A_full.shape[0] != b_full.shape[0]:
            raise SolverInputError("constraint matrix/vector shapes are inconsistent")
        if not (np.all(np.isfinite(A_full)) and np.all(np.isfinite(b_full))):
            raise SolverInputError("constraints contain non-finite values")
        A_kept, b_kept, kept_idx, inconsistency = _filter_constraint_rows(A_full, b_full)
        if inconsistency > 1e-8:
            return QpSolution(
                gamma=np.zeros(n), status=INFEASIBLE, primal_residual=np.inf,
                kkt_residual=np.inf, comp_residual=np.inf,
                objective_value=np.inf, iterations=0,
                eq_dual=np.zeros(A_kept.shape[0]), bound_dual=np.zeros(n),
                infeasibility=inconsistency,
            )
    else:
        A_full = b_full = None
        A_kept = np.zeros((0, n))
        b_kept = np.zeros(0)
    pre.A_kept = A_kept
    m = A_kept.shape[0]

    scale_b = max(1.0, float(np.max(np.abs(b_kept))) if m else 0.0)

    # No inequality: a single exact KKT solve suffices.
    if not problem.nonneg:
        factor = _HessianFactor(pre, tau=1e-12)
        eq = _EqSolver(pre, A_kept, b_kept, factor)
        x, nu = eq.step(-pre.q)
        x, nu = _refine_eqp(pre, A_kept, b_kept, factor, x, nu, rounds=3)
        mu = np.zeros(n)
        prim, stat, comp = _candidate_report(pre, x, nu, mu, A_full, b_full)
        status = OPTIMAL if prim <= opts.eq_tol * scale_b else MAX_ITER
        return QpSolution(x, status, prim, stat, comp, pre.objective(x), 1,
                          nu, mu, polished=True)

    rho = opts.rho if opts.rho is not None else float(
        np.clip(np.mean(pre.diagH) if np.any(pre.diagH > 0) else 1.0, 1e-4, 1e4)
    )
    factor = _HessianFactor(pre, tau=rho)
    eq = _EqSolver(pre, A_kept, b_kept, factor)

    x = np.zeros(n)
    zeta = np.zeros(n)
    u = np.zeros(n)
    nu = np.zeros(m)
    alpha = opts.over_relax

    best = None  # lowest-residual candidate, returned if max_iter is hit
    prev_prim = np.inf
    stalled_checks = 0
    nnls_checked = False

    def stat_scale(gamma, mu, nu):
        s = max(1.0, float(np.max(np.abs(pre.q))) if n else 1.0)
        if mu.size:
            s = max(s, float(np.max(np.abs(mu))))
        if nu.size and m:
            s = max(s, float(np.max(np.abs(A_kept.T @ nu))))
        return s

    it = 0
    polish_at = 100
    while it < opts.max_iter:
        it += 1
        rhs = rho * (zeta - u) - pre.q
        xnew, nu = eq.step(rhs)
        x = xnew
        xr = alpha * x + (1.0 - alpha) * zeta
        zeta_old = zeta
        zeta = np.maximum(xr + u, 0.0)
        u = u + xr - zeta

        if it % opts.check_every == 0 or it == opts.max_iter:
            mu = np.maximum(-rho * u, 0.0)
            gamma = zeta
            prim, stat, comp = _candidate_report(pre, gamma, nu, mu, A_full, b_full)
            sscale = stat_scale(gamma, mu, nu)
            cscale = max(1.0, float(np.max(gamma)) if n else 1.0) * max(
                1.0, float(np.max(mu)) if n else 1.0
            )
            ok = (
                prim <= opts.eq_tol * scale_b
                and stat <= opts.stat_tol * sscale
                and comp <= opts.stat_tol * cscale
            )
            score = prim / scale_b + stat / sscale + comp / cscale
            if best is None or score < best[0]:
                best = (score, gamma.copy(), nu.copy(), mu.copy(), prim, stat, comp)

            do_polish = opts.polish and (ok or it >= polish_at or it == opts.max_iter)
            if do_polish:
                polish_at = min(2 * polish_at, 2 * opts.max_iter)
                polished = _polish(pre, A_kept, b_kept, A_full, b_full,
                                   x + u, opts, scale_b)
                if polished is not None:
                    g, pnu, pmu, pprim, pstat, pcomp = polished
                    return QpSolution(
                        g, OPTIMAL, pprim, pstat, pcomp, pre.objective(g), it,
                        pnu, pmu, polished=True,
                    )
            if ok:
                return QpSolution(
                    gamma.copy(), OPTIMAL, prim, stat, comp, pre.objective(gamma),
                    it, nu.copy(), mu, polished=False,
                )

            # Stall -> certify (in)feasibility of {A g = b, g >= 0} once.
            if m and prim > 1e3 * opts.eq_tol * scale_b:
                if prev_prim / max(prim, 1e-300) < 1.02:
                    stalled_checks += 1
                else:
                    stalled_checks = 0
                if stalled_checks >= 8 and not nnls_checked:
                    nnls_checked = True
                    gstar, resid = _nonneg_lsq(A_kept, b_kept)
                    if resid > 1e-8 * scale_b:
                        viol = np.abs(A_full @ gstar - b_full)
                        return QpSolution(
                            gstar, INFEASIBLE, float(viol.max()), np.inf, np.inf,
                            pre.objective(gstar), it, np.zeros(m), np.zeros(n),
                            infeasibility=float(resid),
                        )
            prev_prim = prim

            if it % opts.adapt_every == 0 and it < opts.max_iter:
                rp = float(np.max(np.abs(x - zeta))) if n else 0.0
                rd = rho * float(np.max(np.abs(zeta - zeta_old))) if n else 0.0
                if rp > 0 and rd > 0:
                    ratio = np.sqrt(rp / rd)
                    if ratio > 5.0 or ratio < 0.2:
                        rho_new = float(np.clip(rho * np.clip(ratio, 0.2, 5.0), 1e-8, 1e8))
                        u = u * (rho / rho_new)  # keep the unscaled dual fixed
                        rho = rho_new
                        factor = _HessianFactor(pre, tau=rho)
                        eq = _EqSolver(pre, A_kept, b_kept, factor)

    _, gamma, nu_b, mu_b, prim, stat, comp = best
    return QpSolution(gamma, MAX_ITER, prim, stat, comp, pre.objective(gamma),
                      opts.max_iter, nu_b, mu_b, polished=False)


def _nonneg_lsq(A, b):
    """min ||A g - b|| over g >= 0; the feasibility certificate for {Ag=b, g>=0}.

    Solved with this module's own splitting + polish (the subproblem has no
    equality constraints, so there is no recursion into this path).
    """
    sub = QpProblem(
        var_count=A.shape[1],
        blocks=[ObjectiveBlock(A, b, 1.0)],
        ridge=0.0,
        nonneg=True,
    )
    sol = solve(sub, SolveOptions(max_iter=20000))
    return sol.gamma, float(np.linalg.norm(A @ sol.gamma - b))


def _refine_eqp(pre, A_f, b, factor, xf, nu, rounds=3, free=None):
    """Iterative refinement of a regularized equality-constrained KKT solve."""
    m = A_f.shape[0]
    for _ in range(rounds):
        if free is None:
            Hx = pre.H_apply(xf)
            q = pre.q
        else:
            full = np.zeros(pre.n)
            full[free] = xf
            Hx = pre.H_apply(full)[free]
            q = pre.q[free]
        r1 = -q - Hx
        if m:
            r1 = r1 - A_f.T @ nu
            r2 = b - A_f @ xf
        y = factor.solve(r1)
        if m:
            T = factor.solve(np.ascontiguousarray(A_f.T))
            S = A_f @ T
            dnu = lu_solve(lu_factor(S + 1e-14 * np.eye(m)), A_f @ y - r2)
            dx = y - T @ dnu
        else:
            dnu = np.zeros(0)
            dx = y
        xf = xf + dx
        nu = nu + dnu
    return xf, nu


def _polish(pre, A_kept, b_kept, A_full, b_full, xu, opts, scale_b):
    """Active-set refinement from the splitting iterate's clamp pattern.

    Returns (gamma, nu, mu, prim, stat, comp) when the refined point passes
    the KKT tolerances, else None.
    """
    n = pre.n
    m = A_kept.shape[0]
    act = xu < 0.0
    hscale = max(1.0, float(np.max(pre.diagH)) if n else 1.0)
    delta = 1e-9 * hscale
    best = None

    for _round in range(40):
        free = np.flatnonzero(~act)
        if free.size == 0:
            gamma = np.zeros(n)
            nu = np.zeros(m)
        else:
            factor = _HessianFactor(pre, tau=delta, free=free)
            A_f = np.ascontiguousarray(A_kept[:, free]) if m else np.zeros((0, free.size))
            qf = pre.q[free]
            if m:
                T = factor.solve(np.ascontiguousarray(A_f.T))
                S = A_f @ T + delta * np.eye(m)
                try:
                    Slu = lu_factor(S)
                except Exception:
                    return None
                y = factor.solve(-qf)
                nu = lu_solve(Slu, A_f @ y - b_kept)
                xf = y - T @ nu
            else:
                nu = np.zeros(0)
                xf = factor.solve(-qf)
            xf, nu = _refine_eqp(pre, A_f, b_kept, factor, xf, nu,
                                 rounds=3, free=free)
            gamma = np.zeros(n)
            gamma[free] = xf

        mu = pre.H_apply(gamma) + pre.q
        if m:
            mu = mu + A_kept.T @ nu
        mu_act = np.where(act, mu, 0.0)

        gtol = 1e-11 * max(1.0, float(np.max(np.abs(gamma))) if n else 1.0)
        new_act = act | (gamma < -gtol)
        release = act & (mu < -opts.stat_tol * 1e-2)
        new_act = new_act & ~release

        candidate = np.maximum(gamma, 0.0)
        mu_rep = np.maximum(mu_act, 0.0)
        prim, stat, comp = _candidate_report(pre, candidate, nu, mu_rep, A_full, b_full)
        sscale = max(1.0, float(np.max(np.abs(pre.q))) if n else 1.0,
                     float(np.max(np.abs(mu_rep))) if n else 1.0)
        if m and nu.size:
            sscale = max(sscale, float(np.max(np.abs(A_kept.T @ nu))))
        cscale = max(1.0, float(np.max(candidate)) if n else 1.0) * max(
            1.0, float(np.max(mu_rep)) if n else 1.0
        )
        score = prim / scale_b + stat / sscale + comp / cscale
        ok = (
            prim <= opts.eq_tol * scale_b
            and stat <= opts.stat_tol * sscale
            and comp <= opts.stat_tol * cscale
            and float(np.min(mu_rep) if n else 0.0) >= -opts.stat_tol * sscale
        )
        if ok and (best is None or score < best[0]):
            best = (score, candidate, nu.copy(), mu_rep, prim, stat, comp)
        if np.array_equal(new_act, act):
            break
        act = new_act

    if best is None:
        return None
    _, candidate, nu, mu_rep, prim, stat, comp = best
    return candidate, nu, mu_rep, prim, stat, comp


def check_kkt(problem: QpProblem, solution: QpSolution) -> KktReport:
    """Recompute KKT residuals for a solution, independent of solver state."""
    pre = _Pre(problem)
    g = np.asarray(solution.gamma, dtype=float)
    mu = np.asarray(solution.bound_dual, dtype=float)
    nu = np.asarray(solution.eq_dual, dtype=float)

    stat_vec = pre.H_apply(g) + pre.q - mu
    prim = 0.0
    if problem.A is not None and problem.A.shape[0] > 0:
        A = np.asarray(problem.A, dtype=float)
        b = np.asarray(problem.b, dtype=float).ravel()
        A_kept, b_kept, kept_idx, _ = _filter_constraint_rows(A, b)
        if nu.shape[0] == A_kept.shape[0]:
            stat_vec = stat_vec + A_kept.T @ nu
        elif nu.shape[0] == A.shape[0]:
            stat_vec = stat_vec + A.T @ nu
        prim = float(np.max(np.abs(A @ g - b)))
    comp = float(np.max(np.abs(mu * g))) if g.size else 0.0
    dual_feas = float(np.min(mu)) if mu.size else 0.0
    return KktReport(
        stationarity=float(np.max(np.abs(stat_vec))) if stat_vec.size else 0.0,
        primal=prim,
        dual_feasibility=dual_feas,
        complementarity=comp,
        objective=pre.objective(g),
    )
