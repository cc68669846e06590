"""Constrained analysis step: per-member minimization of the Kalman quadratic
cost subject to an energy band on the grid-mean diagnostic energy and a hard
lower bound on total convective activity.

The cost is minimized in transformed coordinates z with x = x_b + L z, where
L is the Cholesky factor of the localized background covariance; in z the
prior term is (1/2) z^T z so the quadratic stays well conditioned no matter
how ill conditioned the covariance is.  Floor-active activity coordinates are
pinned as equalities by an active-set scheme (their multipliers certify the
bound exactly), while the energy band enters through an augmented Lagrangian
with one multiplier per side; inner subproblems are solved by damped Newton
steps that reuse a single Cholesky factor of the quadratic term.  The solve
is warm started at the activity-box projection of the unconstrained
minimizer and returns that minimizer untouched whenever it is feasible, so
with vacuous constraints the filter reduces bit-for-bit to the plain
perturbed-observation update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky

from .filters import Ensemble, EnsembleStats, LocalizationSpec, enkf_analysis, ensemble_stats
from .model import ModelParams, anomaly_floor, grid_mean_energy, grid_mean_energy_gradient


class CovarianceError(RuntimeError):
    """Localized covariance could not be factorized even after regularization."""


class ConstrainedSolveError(RuntimeError):
    """A member solve hit its iteration cap while still infeasible."""

    def __init__(self, msg, best=None, energy_violation=0.0, bound_violation=0.0):
        super().__init__(msg)
        self.best = best
        self.energy_violation = energy_violation
        self.bound_violation = bound_violation


@dataclass(frozen=True)
class ConstraintSpec:
    """Band for the grid-mean diagnostic energy plus the activity floor
    (total activity A + a_bar must stay at or above a_floor).

    a_floor <= 0 disables the positivity bound; with the bound disabled,
    states whose activity is nonpositive have no defined energy and are
    treated as feasible, which is what makes a fully vacuous spec reduce the
    constrained filter to the plain one.
    """

    energy_min: float = 0.015
    energy_max: float = 0.08
    a_floor: float = 1e-6
    solver_tol: float = 1e-8
    max_iters: int = 200

    def __post_init__(self):
        if not self.energy_min < self.energy_max:
            raise ValueError("energy_min must be below energy_max")
        if self.solver_tol <= 0.0:
            raise ValueError("solver_tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def is_feasible(self, vec: np.ndarray, params: ModelParams, tol: float | None = None) -> bool:
        tol = self.solver_tol if tol is None else tol
        n = params.n_grid
        activity = vec[3 * n :] + params.a_bar
        if np.min(activity) < self.a_floor:
            return False
        if np.min(activity) <= 0.0:
            return True  # bound disabled and energy undefined: nothing to enforce
        e = grid_mean_energy(vec, params)
        return self.energy_min - tol <= e <= self.energy_max + tol


@dataclass
class TransformedProblem:
    """Quadratic cost in transformed coordinates plus the data needed to map
    candidate solutions back to state space."""

    sqrt_cov: np.ndarray        # lower-triangular L with L L^T = P_loc
    quadratic_term: np.ndarray  # I + (H L)^T R^-1 (H L)
    linear_term: np.ndarray     # ((H x_b) - z_obs)^T R^-1 H L as a vector
    background: np.ndarray      # member vector x_b
    obs_values: np.ndarray      # perturbed observation for this member
    obs_variance: float


def factor_localized_covariance(cov_loc: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with escalating diagonal jitter, kept small
    enough that L L^T reconstructs the input to ~1e-10 of its scale."""
    scale = max(float(np.mean(np.diag(cov_loc))), 1e-300)
    jitter = 1e-12
    for _ in range(6):
        try:
            return cholesky(
                cov_loc + jitter * scale * np.eye(cov_loc.shape[0]), lower=True
            )
        except np.linalg.LinAlgError:
            jitter *= 100.0
    raise CovarianceError(f"Cholesky failed with jitter up to {jitter * scale:.2e}")


def build_cost(
    member: np.ndarray,
    stats: EnsembleStats,
    obs_values: np.ndarray,
    obs_variance: float,
    params: ModelParams,
    sqrt_cov: np.ndarray | None = None,
    quadratic_term: np.ndarray | None = None,
) -> TransformedProblem:
    """Assemble the transformed quadratic for one member and one (possibly
    perturbed) observation vector.

    sqrt_cov and quadratic_term depend only on the ensemble statistics, so
    callers looping over members should compute them once and pass them in.
    """
    n = params.n_grid
    L = factor_localized_covariance(stats.localized_covariance) if sqrt_cov is None else sqrt_cov
    G = L[3 * n :, :]  # observation rows of L (A block)
    quad = np.eye(4 * n) + (G.T @ G) / obs_variance if quadratic_term is None else quadratic_term
    predicted = member[3 * n :] + params.a_bar
    linear = G.T @ (predicted - np.asarray(obs_values, dtype=float)) / obs_variance
    return TransformedProblem(
        sqrt_cov=L,
        quadratic_term=quad,
        linear_term=linear,
        background=np.asarray(member, dtype=float).copy(),
        obs_values=np.asarray(obs_values, dtype=float).copy(),
        obs_variance=obs_variance,
    )


def solve_unconstrained(problem: TransformedProblem) -> np.ndarray:
    """Minimizer of the transformed quadratic, mapped back to state space."""
    z = np.linalg.solve(problem.quadratic_term, -problem.linear_term)
    return problem.background + problem.sqrt_cov @ z


@dataclass
class SolveInfo:
    fast_path: bool
    outer_iters: int = 0
    inner_iters: int = 0
    mu_lo: float = 0.0
    mu_hi: float = 0.0
    bound_multipliers: np.ndarray | None = None
    energy: float = 0.0
    kkt_stationarity: float = float("nan")
    slackness: float = 0.0
    objective_traces: list = field(default_factory=list)


class _KKTSolver:
    """Solves (Q + U^T U) d + C^T lam = rhs, C d = r, reusing one Cholesky
    factor of Q with a Woodbury correction for the low-rank curvature U.

    C holds the L rows of floor-pinned activity coordinates; U stacks the
    scaled energy-penalty curvature directions (the transformed energy
    gradient plus the dominant near-floor rows of the energy Hessian)."""

    def __init__(self, quadratic_term: np.ndarray):
        self._factor = cho_factor(quadratic_term, lower=True, check_finite=False)

    def _apply_inv(self, rhs, low_rank):
        base = cho_solve(self._factor, rhs, check_finite=False)
        if low_rank is None or low_rank.shape[0] == 0:
            return base
        qu = cho_solve(self._factor, low_rank.T, check_finite=False)
        cap = low_rank @ qu
        cap[np.diag_indices_from(cap)] += 1.0
        return base - qu @ np.linalg.solve(cap, low_rank @ base)

    def solve(self, rhs, C, r, low_rank=None):
        if C is None or C.shape[0] == 0:
            return self._apply_inv(rhs, low_rank), np.zeros(0)
        hinv_rhs = self._apply_inv(rhs, low_rank)
        hinv_ct = self._apply_inv(C.T, low_rank)
        schur = C @ hinv_ct
        schur[np.diag_indices_from(schur)] += 1e-13 * max(1.0, float(np.trace(schur)))
        lam = np.linalg.solve(schur, C @ hinv_rhs - r)
        d = hinv_rhs - hinv_ct @ lam
        return d, lam


def constrained_analysis_member(
    problem: TransformedProblem,
    constraints: ConstraintSpec,
    params: ModelParams,
    collect_trace: bool = False,
    kkt: _KKTSolver | None = None,
) -> tuple[np.ndarray, SolveInfo]:
    """Solve one member's constrained analysis.

    Returns (state vector, diagnostics); raises ConstrainedSolveError with
    the best iterate attached when the outer budget runs out while a
    constraint is still violated beyond solver_tol.
    """
    n = params.n_grid
    L = problem.sqrt_cov
    Q = problem.quadratic_term
    b = problem.linear_term
    x_b = problem.background
    tol = constraints.solver_tol
    e_lo, e_hi = constraints.energy_min, constraints.energy_max
    bound = anomaly_floor(constraints.a_floor, params.a_bar)
    bound_enabled = constraints.a_floor > 0.0
    L_A = L[3 * n :, :]
    c_req = bound - x_b[3 * n :]  # constraint (L z)_A >= c_req elementwise

    if kkt is None:
        kkt = _KKTSolver(Q)
    z_unc = kkt.solve(-b, None, np.zeros(0))[0]
    x_unc = x_b + L @ z_unc
    if constraints.is_feasible(x_unc, params):
        info = SolveInfo(fast_path=True)
        act = x_unc[3 * n :] + params.a_bar
        info.energy = grid_mean_energy(x_unc, params) if np.min(act) > 0 else float("nan")
        return x_unc, info

    info = SolveInfo(fast_path=False)
    z = z_unc

    def pin(zv, working):
        """Least-norm correction putting the working coordinates exactly on
        the floor (transformed equivalent of the activity-box projection of
        the warm start)."""
        if working.size == 0:
            return zv
        C = L_A[working, :]
        resid = c_req[working] - C @ zv
        gram = C @ C.T
        gram[np.diag_indices_from(gram)] += 1e-13 * max(1.0, float(np.trace(gram)))
        return zv + C.T @ np.linalg.solve(gram, resid)

    def pin_consistent(zv, working):
        """Pin the working set and absorb any coordinates the correction
        itself pushes through the floor (keeps the iterate inside the energy
        log domain, since the floor is strictly positive activity)."""
        for _ in range(16):
            zv = pin(zv, working)
            new = np.setdiff1d(np.where(L_A @ zv < c_req - 1e-12)[0], working)
            if new.size == 0:
                break
            working = np.union1d(working, new)
        return zv, working

    z, working = pin_consistent(z, np.where(L_A @ z < c_req)[0])

    mu_lo = 0.0
    mu_hi = 0.0
    rho = 1e3
    lam = np.zeros(working.size)
    prev_violation = np.inf
    e = np.nan

    def augmented(zv):
        x = x_b + L @ zv
        if np.min(x[3 * n :] + params.a_bar) <= 0.0:
            return np.inf, x, np.inf  # outside the energy log domain
        e = grid_mean_energy(x, params)
        val = 0.5 * float(zv @ (Q @ zv)) + float(b @ zv)
        t_lo = max(0.0, mu_lo + rho * (e_lo - e))
        t_hi = max(0.0, mu_hi + rho * (e - e_hi))
        val += (t_lo**2 - mu_lo**2) / (2.0 * rho)
        val += (t_hi**2 - mu_hi**2) / (2.0 * rho)
        return val, x, e

    def penalty_low_rank(t_lo, t_hi, ge_z, act, working):
        """Curvature factor U with H = Q + U^T U for the active band penalty:
        the Gauss-Newton outer product of the energy gradient plus the
        dominant (near-floor) diagonal of the energy Hessian in the activity
        block, which would otherwise wall the Newton direction."""
        if t_lo <= 0.0 and t_hi <= 0.0:
            return None
        rows = [np.sqrt(rho) * ge_z]
        weight = t_hi  # the lower-bound side would contribute negative curvature
        if weight > 0.0:
            h_diag = weight * params.s_mean / (params.gamma * params.q_tilde) / (
                act**2 * n
            )
            if working.size:
                h_diag[working] = 0.0
            big = np.where(h_diag > 0.5)[0]
            if big.size > 12:
                # keep the dominant wall rows; the line search covers the rest
                big = big[np.argsort(h_diag[big])[-12:]]
            if big.size:
                rows.append(np.sqrt(h_diag[big])[:, None] * L_A[big, :])
        return np.vstack([r if r.ndim == 2 else r[None, :] for r in rows])

    for outer in range(constraints.max_iters):
        info.outer_iters = outer + 1
        inner_tol = max(0.1 * tol, 10.0 ** (-(outer + 4)))
        val, x, e = augmented(z)
        trace = [val] if collect_trace else None
        C = L_A[working, :] if working.size else None
        inner_converged = False
        stall_count = 0
        for _ in range(80):
            info.inner_iters += 1
            if bound_enabled:
                # absorb coordinates knocked through the floor by previous
                # corrections before taking a step
                below = np.setdiff1d(
                    np.where(L_A @ z - c_req < -1e-12)[0], working
                )
                if below.size:
                    z, working = pin_consistent(z, np.union1d(working, below))
                    C = L_A[working, :]
                    val, x, e = augmented(z)
            t_lo = max(0.0, mu_lo + rho * (e_lo - e))
            t_hi = max(0.0, mu_hi + rho * (e - e_hi))
            ge_z = L.T @ grid_mean_energy_gradient(x, params)
            grad = Q @ z + b + (t_hi - t_lo) * ge_z
            act = x[3 * n :] + params.a_bar
            low_rank = penalty_low_rank(t_lo, t_hi, ge_z, act, working)
            d, lam = kkt.solve(
                -grad,
                C,
                -(c_req[working] - C @ z) if working.size else np.zeros(0),
                low_rank,
            )
            if np.linalg.norm(d) <= inner_tol * max(1.0, np.linalg.norm(z)):
                inner_converged = True
                break
            # ratio test: cap the step at the first floor contact among
            # unpinned activity coordinates (or at the log-domain wall when
            # the floor bound is disabled) and pin the blocking coordinate
            d_act = L_A @ d
            shrink = d_act < -1e-300
            if working.size:
                shrink[working] = False
            blocker = -1
            cap = np.inf
            if np.any(shrink):
                if bound_enabled:
                    gap_room = (L_A @ z - c_req)[shrink]
                    ratios = gap_room / -d_act[shrink]
                else:
                    ratios = 0.97 * act[shrink] / -d_act[shrink]
                idx_local = int(np.argmin(ratios))
                cap = float(max(ratios[idx_local], 0.0))
                if bound_enabled:
                    blocker = int(np.where(shrink)[0][idx_local])
            if bound_enabled and blocker >= 0 and cap <= 1e-14:
                # already sitting on the blocking bound: pin it and retry
                z, working = pin_consistent(z, np.union1d(working, [blocker]))
                C = L_A[working, :]
                val, x, e = augmented(z)
                continue
            step = min(1.0, cap)
            hit_bound = bound_enabled and blocker >= 0 and cap < 1.0
            g_dot_d = float(grad @ d)
            accepted = False
            for _ in range(30):
                cand = z + step * d
                cand_val, cx, ce = augmented(cand)
                if cand_val <= val + 1e-4 * step * min(0.0, g_dot_d) + 1e-15:
                    accepted = True
                    break
                step *= 0.5
                hit_bound = False
            if not accepted:
                break
            stalled = val - cand_val <= 1e-9 * (1.0 + abs(val))
            z, val, x, e = cand, cand_val, cx, ce
            if collect_trace:
                trace.append(val)
            if not hit_bound:
                stall_count = stall_count + 1 if stalled else 0
                if stall_count >= 3:
                    break
            if hit_bound:
                z, working = pin_consistent(z, np.union1d(working, [blocker]))
                C = L_A[working, :]
                val, x, e = augmented(z)
        if collect_trace:
            info.objective_traces.append(trace)

        # active-set update: release pinned coordinates whose multiplier says
        # the bound pulls the wrong way (the KKT solve returns equality
        # multipliers lam with nu = -lam for the inequality form); pin newly
        # violated ones.  Multipliers are only trusted from converged inner
        # solves.
        if inner_converged and working.size:
            release = working[lam > 1e-12]
        else:
            release = np.array([], dtype=int)
        gap = L_A @ z - c_req
        add = np.setdiff1d(np.where(gap < -max(tol, 1e-12))[0], working)
        if release.size or add.size:
            z, working = pin_consistent(
                z, np.union1d(np.setdiff1d(working, release), add)
            )
            lam = np.zeros(working.size)
            continue

        mu_lo = max(0.0, mu_lo + rho * (e_lo - e))
        mu_hi = max(0.0, mu_hi + rho * (e - e_hi))
        # convergence is judged on the candidate actually returned: the
        # activity block clamped exactly onto the floor.  Near-parallel
        # pinned rows limit the attainable z-space equality residual, so the
        # raw residual only needs to be small enough for the clamp to be a
        # faithful correction.
        x_cand = x_b + L @ z
        x_cand[3 * n :] = np.maximum(x_cand[3 * n :], bound)
        e_cand = grid_mean_energy(x_cand, params)
        bound_resid = float(np.max(-gap, initial=0.0))
        violation = max(e_lo - e_cand, e_cand - e_hi, 0.0)
        energy_slack = abs(mu_lo * (e_lo - e_cand)) + abs(mu_hi * (e_cand - e_hi))
        # complementarity is judged relative to the multiplier scale, the
        # attainable precision of the boundary residual
        slack_ok = energy_slack <= tol * (1.0 + mu_lo + mu_hi)
        feasible_now = violation <= tol and bound_resid <= 1e-5
        if feasible_now and (slack_ok or outer == constraints.max_iters - 1):
            nu = np.zeros(n)
            if working.size:
                nu[working] = np.maximum(-lam, 0.0)
            ge_z = L.T @ grid_mean_energy_gradient(x, params)
            lagr_grad = Q @ z + b + (mu_hi - mu_lo) * ge_z - L_A.T @ nu
            info.kkt_stationarity = float(np.linalg.norm(lagr_grad))
            info.mu_lo, info.mu_hi = mu_lo, mu_hi
            info.bound_multipliers = nu
            info.energy = e_cand
            info.slackness = float(
                np.sum(np.abs(nu * gap))
                + abs(mu_lo * (e_lo - e_cand))
                + abs(mu_hi * (e_cand - e_hi))
            )
            return x_cand, info
        if violation > 0.25 * prev_violation or (feasible_now and not slack_ok):
            rho = min(rho * 10.0, 1e10)
        prev_violation = violation

    gap = L_A @ z - c_req
    x_cand = x_b + L @ z
    x_cand[3 * n :] = np.maximum(x_cand[3 * n :], bound)
    e_cand = grid_mean_energy(x_cand, params)
    raise ConstrainedSolveError(
        f"member solve exhausted {constraints.max_iters} outer iterations "
        f"(energy {e_cand:.6f} vs band [{e_lo}, {e_hi}], worst raw bound "
        f"residual {max(float(np.max(-gap, initial=0.0)), 0.0):.2e})",
        best=x_cand,
        energy_violation=max(e_lo - e_cand, e_cand - e_hi, 0.0),
        bound_violation=max(float(np.max(-gap, initial=0.0)), 0.0),
    )


def constrained_analysis(
    ensemble: Ensemble,
    obs_values: np.ndarray,
    obs_variance: float,
    loc: LocalizationSpec,
    constraints: ConstraintSpec,
    params: ModelParams,
    rng: np.random.Generator,
    perturbations: np.ndarray | None = None,
    collect_info: bool = False,
):
    """Constrained analysis for the whole ensemble.

    Every member gets its own perturbed observation.  Members whose plain
    perturbed-observation update is already feasible keep that update
    bit-for-bit; the rest are re-solved.  Per-member failures are aggregated
    into one ConstrainedSolveError naming the members.
    """
    n = params.n_grid
    if perturbations is None:
        perturbations = np.sqrt(obs_variance) * rng.standard_normal((ensemble.size, n))
    unconstrained = enkf_analysis(
        ensemble, obs_values, obs_variance, loc, params, rng, perturbations=perturbations
    )
    stats = ensemble_stats(ensemble, loc)
    background = ensemble.as_matrix()
    out = unconstrained.as_matrix()
    sqrt_cov: np.ndarray | None = None
    quad: np.ndarray | None = None
    kkt: _KKTSolver | None = None
    infos: list[SolveInfo] = []
    failures: list[tuple[int, str]] = []
    for i in range(ensemble.size):
        if constraints.is_feasible(out[i], params):
            act = out[i][3 * n :] + params.a_bar
            e = grid_mean_energy(out[i], params) if np.min(act) > 0 else float("nan")
            infos.append(SolveInfo(fast_path=True, energy=e))
            continue
        if sqrt_cov is None:
            sqrt_cov = factor_localized_covariance(stats.localized_covariance)
            G = sqrt_cov[3 * n :, :]
            quad = np.eye(4 * n) + (G.T @ G) / obs_variance
            kkt = _KKTSolver(quad)
        problem = build_cost(
            background[i],
            stats,
            obs_values + perturbations[i],
            obs_variance,
            params,
            sqrt_cov=sqrt_cov,
            quadratic_term=quad,
        )
        try:
            out[i], member_info = constrained_analysis_member(
                problem, constraints, params, kkt=kkt
            )
            infos.append(member_info)
        except ConstrainedSolveError as err:
            failures.append((i, str(err)))
    if failures:
        raise ConstrainedSolveError(
            "constrained solves failed for members "
            + "; ".join(f"{i}: {msg}" for i, msg in failures)
        )
    analysis = Ensemble.from_matrix(out, n, ensemble.time)
    if collect_info:
        return analysis, infos
    return analysis
