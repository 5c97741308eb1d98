"""Perturbed feedback construction, eps-ladder, and weak limit extraction.

For each eps > 0 the perturbed problem is uniquely closed-loop solvable with

    Theta_eps = -(R + eps I + D'P_eps D)^{-1} (B'P_eps + D'P_eps C + S),
    v_eps     = -(R + eps I + D'P_eps D)^{-1} (B'eta + D'zeta + D'P_eps sigma + rho).

Running a decreasing eps ladder and measuring consecutive L2 distances on a
truncated window [0, T - delta] yields the weak closed-loop limit pair
(Theta*, v*): the limit is taken as the last ladder member, with the Cauchy
distances attached as evidence.  No extrapolation is applied by default; the
convergence is guaranteed without a rate, so the ladder depth is the
accuracy dial (a Richardson post-process is available but experimental).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import bsde as bsde_mod
from .bsde import AdjointProfile
from .core import GridFn, pinv
from .errors import BlowUpError, DegeneratePerturbationError, InvalidInputError
from .problem import InitialPair, SLQProblem
from .riccati import (
    RegularityReport,
    RiccatiSolution,
    check_inner_invertible,
    check_regularity,
    solve_gre,
    solve_perturbed,
)

__all__ = [
    "PerturbedSolution",
    "WeakClosedLoopStrategy",
    "SolvabilityReport",
    "theta_eps",
    "v_eps_parts",
    "run_ladder",
    "extract_limit",
    "diagnose",
    "default_ladder",
    "ladder_summary_csv",
    "strategy_csv",
]


def _inner_matrix(P: RiccatiSolution, p: SLQProblem, s) -> tuple:
    Ps = P.at(s)
    D = p.D(s)
    R = p.R(s)
    DPD = D.T @ Ps @ D
    K = R + DPD
    scale = float(np.abs(R).max(initial=0.0) + np.abs(DPD).max(initial=0.0)) + P.epsilon
    if P.epsilon > 0.0:
        K = K + P.epsilon * np.eye(p.m)
    L = p.B(s).T @ Ps + D.T @ Ps @ p.C(s) + p.S(s)
    return K, L, Ps, D, scale


def _solve_inner(K: np.ndarray, rhs: np.ndarray, eps: float, scale: float, s) -> np.ndarray:
    if eps > 0.0:
        check_inner_invertible(K, scale, eps, f"s={float(s):.6g}")
        if K.shape[0] == 1:
            return rhs / K[0, 0]
        return np.linalg.solve(K, rhs)
    return pinv(K) @ rhs


def theta_eps(P: RiccatiSolution, p: SLQProblem, s) -> np.ndarray:
    """Perturbed feedback gain Theta_eps(s), an (m, n) matrix.

    Uses the true inverse of R + eps I + D'P_eps D; with eps = 0 this is the
    pseudoinverse candidate gain of the generalized equation instead.
    """
    K, L, _, _, scale = _inner_matrix(P, p, s)
    return -_solve_inner(K, L, P.epsilon, scale, s)


def v_eps_parts(P: RiccatiSolution, adj: AdjointProfile, p: SLQProblem, s):
    """Deterministic and modulated parts of the bias term v_eps(s).

    Returns ``(v_det, v_mod)`` where the per-path value is
    ``v_det + v_mod * M(s)`` (``v_mod`` is None without modulation).
    """
    if adj.epsilon != P.epsilon:
        raise InvalidInputError(
            f"adjoint eps {adj.epsilon} does not match Riccati eps {P.epsilon}"
        )
    K, _, Ps, D, scale = _inner_matrix(P, p, s)
    eta = adj.eta_det_at(s)
    rhs = p.B(s).T @ eta + D.T @ (Ps @ p.sigma.deterministic(s)) + p.rho.deterministic(s)
    v_det = -_solve_inner(K, rhs, P.epsilon, scale, s)
    v_mod = None
    if adj.modulated_h is not None:
        h = float(adj.h_at(s))
        mod_rhs = (p.B(s) + adj.gamma * D).reshape(p.m) * h
        v_mod = -_solve_inner(K, mod_rhs, P.epsilon, scale, s)
    return v_det, v_mod


@dataclass(frozen=True)
class PerturbedSolution:
    """Feedback pair (Theta_eps, v_eps) with its Riccati and adjoint data.

    theta node values satisfy the defining formula at every node exactly (to
    round-off); v_mod_profile, when present, is the deterministic profile
    multiplying M(s) = exp(gamma W(s) - gamma^2 s / 2) pathwise.
    """

    epsilon: float
    P: RiccatiSolution
    theta: GridFn
    adjoint: AdjointProfile
    v_det: GridFn
    v_mod_profile: Optional[GridFn] = None
    gamma: Optional[float] = None


@dataclass(frozen=True)
class WeakClosedLoopStrategy:
    """Limit pair (Theta*, v*) on the truncated window [0, T - delta].

    cauchy_evidence rows are (eps_k, theta distance, v distance) between
    consecutive ladder members in L2(0, T - delta); ``converged`` records
    whether the final distance passed the declared tolerance.
    """

    theta_star: GridFn
    v_star_det: GridFn
    v_star_mod_profile: Optional[GridFn]
    gamma: Optional[float]
    delta: float
    epsilon: float
    cauchy_evidence: list
    converged: bool


def default_ladder(eps_max: float = 1.0, eps_min: float = 2.0**-10, factor: float = 0.5) -> list:
    """Geometric ladder eps_max * factor^k down to eps_min (inclusive)."""
    if not (0.0 < factor < 1.0) or eps_min <= 0.0 or eps_max < eps_min:
        raise InvalidInputError("need 0 < factor < 1 and 0 < eps_min <= eps_max")
    out = []
    e = eps_max
    while e >= eps_min * (1.0 - 1e-12):
        out.append(e)
        e *= factor
    return out


def _tag_eps(exc: Exception, eps: float) -> Exception:
    if exc.args:
        exc.args = (f"eps={eps:g}: {exc.args[0]}",) + exc.args[1:]
    return exc


def run_ladder(p: SLQProblem, ladder, steps: int) -> list:
    """Solve Riccati + adjoint and assemble (Theta_eps, v_eps) per rung.

    All ladder members share one uniform grid so downstream comparisons are
    node-aligned.  Solver errors propagate tagged with their eps.
    """
    ladder = [float(e) for e in ladder]
    if len(ladder) < 3:
        raise InvalidInputError("ladder must have at least 3 members")
    if any(e <= 0.0 for e in ladder):
        raise InvalidInputError("ladder entries must be positive")
    if any(not (a > b) for a, b in zip(ladder, ladder[1:])):
        raise InvalidInputError("ladder must be strictly decreasing")

    out = []
    for eps in ladder:
        try:
            P = solve_perturbed(p, eps, steps)
            adj = bsde_mod.solve_adjoint(p, P, steps)
        except (BlowUpError, DegeneratePerturbationError) as exc:
            raise _tag_eps(exc, eps)
        grid = P.grid
        theta_vals = np.empty((grid.size, p.m, p.n))
        v_det_vals = np.empty((grid.size, p.m))
        v_mod_vals = np.empty((grid.size, p.m)) if adj.modulated_h is not None else None
        for k, s in enumerate(grid):
            theta_vals[k] = theta_eps(P, p, s)
            v_det, v_mod = v_eps_parts(P, adj, p, s)
            v_det_vals[k] = v_det
            if v_mod_vals is not None:
                v_mod_vals[k] = v_mod
        out.append(
            PerturbedSolution(
                epsilon=eps,
                P=P,
                theta=GridFn(grid, theta_vals),
                adjoint=adj,
                v_det=GridFn(grid, v_det_vals),
                v_mod_profile=GridFn(grid, v_mod_vals) if v_mod_vals is not None else None,
                gamma=adj.gamma,
            )
        )
    return out


def _trapz_sq(grid: np.ndarray, sq: np.ndarray) -> float:
    return float(np.trapezoid(sq, grid))


def _v_l2_sq(grid, dv_det, dv_mod, gamma) -> float:
    """E int |dv_det + dv_mod M(s)|^2 ds using E[M] = 1, E[M^2] = e^{gamma^2 s}."""
    sq = np.sum(dv_det**2, axis=1)
    if dv_mod is not None:
        cross = 2.0 * np.sum(dv_det * dv_mod, axis=1)
        sq = sq + cross + np.sum(dv_mod**2, axis=1) * np.exp(gamma**2 * grid)
    return _trapz_sq(grid, sq)


def extract_limit(
    sols: list, delta: float, tol: float, richardson: bool = False
) -> WeakClosedLoopStrategy:
    """Take the weak closed-loop limit of a ladder on [0, T - delta].

    Consecutive L2(0, T - delta) distances are computed for Theta and for the
    v parts; convergence is declared when the final distances fall below
    ``tol * max(1, norm of last iterate)``.  The returned strategy is the
    last ladder member restricted to the window (with ``richardson=True``, an
    experimental 2x-minus-previous extrapolation of the node values).
    """
    if len(sols) < 3:
        raise InvalidInputError("need at least 3 ladder members")
    grid0 = sols[0].theta.grid
    for s in sols[1:]:
        if s.theta.grid.shape != grid0.shape or not np.array_equal(s.theta.grid, grid0):
            raise InvalidInputError("ladder members must share one grid")
    T = grid0[-1]
    if not (0.0 < delta < T):
        raise InvalidInputError(f"delta must be in (0, {T}), got {delta}")
    cut = T - delta
    keep = grid0 <= cut + 1e-15
    if keep.sum() < 2:
        raise InvalidInputError("truncated window contains fewer than 2 grid nodes")
    g = grid0[keep]

    gamma = sols[-1].gamma
    evidence = []
    for a, b in zip(sols[:-1], sols[1:]):
        dth = (b.theta.values - a.theta.values)[keep]
        d_theta = math.sqrt(_trapz_sq(g, np.sum(dth.reshape(g.size, -1) ** 2, axis=1)))
        dvd = (b.v_det.values - a.v_det.values)[keep]
        if a.v_mod_profile is not None and b.v_mod_profile is not None:
            dvm = (b.v_mod_profile.values - a.v_mod_profile.values)[keep]
        elif a.v_mod_profile is None and b.v_mod_profile is None:
            dvm = None
        else:
            raise InvalidInputError("ladder members disagree on modulation structure")
        d_v = math.sqrt(_v_l2_sq(g, dvd, dvm, gamma if gamma is not None else 0.0))
        evidence.append((a.epsilon, d_theta, d_v))

    last = sols[-1]
    th_last = last.theta.values[keep]
    norm_theta = math.sqrt(_trapz_sq(g, np.sum(th_last.reshape(g.size, -1) ** 2, axis=1)))
    vm_last = last.v_mod_profile.values[keep] if last.v_mod_profile is not None else None
    norm_v = math.sqrt(
        _v_l2_sq(g, last.v_det.values[keep], vm_last, gamma if gamma is not None else 0.0)
    )
    converged = evidence[-1][1] <= tol * max(1.0, norm_theta) and evidence[-1][2] <= tol * max(
        1.0, norm_v
    )

    th_vals = last.theta.values[keep]
    vd_vals = last.v_det.values[keep]
    vm_vals = vm_last
    if richardson:
        prev = sols[-2]
        th_vals = 2.0 * th_vals - prev.theta.values[keep]
        vd_vals = 2.0 * vd_vals - prev.v_det.values[keep]
        if vm_vals is not None:
            vm_vals = 2.0 * vm_vals - prev.v_mod_profile.values[keep]

    return WeakClosedLoopStrategy(
        theta_star=GridFn(g, th_vals),
        v_star_det=GridFn(g, vd_vals),
        v_star_mod_profile=GridFn(g, vm_vals) if vm_vals is not None else None,
        gamma=gamma,
        delta=delta,
        epsilon=last.epsilon,
        cauchy_evidence=evidence,
        converged=converged,
    )


@dataclass(frozen=True)
class SolvabilityReport:
    """Verdicts from the closed-loop test and the eps-ladder boundedness probe.

    The raw ladder numbers are always carried so a user can re-judge the
    heuristic thresholds; any finite-ladder verdict is an inference about an
    asymptotic statement.
    """

    closed_loop: RegularityReport
    closed_loop_blowup: Optional[float]
    eta_condition_ok: Optional[bool]
    open_loop_verdict: str  # solvable | not-solvable | inconclusive
    u_norms: list  # (eps, E int |u_eps|^2, std error)
    u_distances: list  # (eps_k, sqrt E int |u_k - u_{k+1}|^2)
    convergence_ratio: float

    def closed_loop_solvable(self) -> bool:
        return (
            self.closed_loop_blowup is None
            and self.closed_loop.is_regular()
            and self.eta_condition_ok is not False
        )


def _eta_range_ok(p: SLQProblem, P: RiccatiSolution, adj: AdjointProfile, tol: float) -> bool:
    """Grid check of the adjoint range condition of the closed-loop test."""
    from .core import range_included

    grid = P.grid
    for k, s in enumerate(grid):
        K, _, Ps, D, _ = _inner_matrix(P, p, s)
        vec = (
            p.B(s).T @ adj.eta_det_at(s)
            + D.T @ (Ps @ p.sigma.deterministic(s))
            + p.rho.deterministic(s)
        )
        if not range_included(vec.reshape(-1, 1), K, tol):
            return False
        if adj.modulated_h is not None:
            mod = (p.B(s) + adj.gamma * D).reshape(p.m) * float(adj.h_at(s))
            if not range_included(mod.reshape(-1, 1), K, tol):
                return False
    return True


def diagnose(
    p: SLQProblem,
    ip: InitialPair,
    ladder,
    steps: int,
    mc,
) -> SolvabilityReport:
    """Diagnose closed-loop and open-loop solvability.

    Closed-loop: generalized Riccati solve plus the regularity tests (a
    finite-time blow-up counts as not regular).  Open-loop: simulate the
    outcome u_eps = Theta_eps X_eps + v_eps for every ladder rung under
    common random numbers, then judge boundedness of E int |u_eps|^2 and the
    decay of consecutive pathwise L2 distances.  Thresholds: bounded means
    max/min of the last three norms < 10 and distances shrinking by >= 1.5x
    per halving; growth by >= 2x per rung over >= 4 rungs means not-solvable;
    anything else is inconclusive.
    """
    from .simulate import feedback_control, simulate_coupled

    blowup_time = None
    eta_ok = None
    try:
        P0 = solve_gre(p, steps)
        reg = check_regularity(P0, p)
        if reg.is_regular():
            try:
                adj0 = bsde_mod.solve_adjoint(p, P0, steps)
                eta_ok = _eta_range_ok(p, P0, adj0, tol=1e-9)
            except Exception:
                eta_ok = None
    except BlowUpError as exc:
        blowup_time = exc.time
        reg = RegularityReport(
            positivity_ok=False, theta_hat_l2=float("inf"), range_ok=False, verdict="not-regular"
        )

    sols = run_ladder(p, ladder, steps)
    controls = [feedback_control(s) for s in sols]
    coupled = simulate_coupled(p, ip, controls, mc)

    u_norms = [
        (sols[i].epsilon, coupled.control_norm_mean[i], coupled.control_norm_se[i])
        for i in range(len(sols))
    ]
    u_distances = [
        (sols[i].epsilon, math.sqrt(max(coupled.pair_dist_mean[i], 0.0)))
        for i in range(len(sols) - 1)
    ]

    norms = np.array([n for _, n, _ in u_norms])
    dists = np.array([d for _, d in u_distances])
    last3 = norms[-3:]
    bounded = float(last3.max()) < 10.0 * max(float(last3.min()), 1e-300)
    ratios = dists[:-1] / np.maximum(dists[1:], 1e-300)
    n_check = min(3, ratios.size)
    shrinking = bool(np.all(ratios[-n_check:] >= 1.5)) if n_check > 0 else False
    growth_ratios = norms[1:] / np.maximum(norms[:-1], 1e-300)
    growing = growth_ratios.size >= 4 and bool(np.all(growth_ratios[-4:] >= 2.0))

    if bounded and shrinking:
        verdict = "solvable"
    elif growing:
        verdict = "not-solvable"
    else:
        verdict = "inconclusive"

    return SolvabilityReport(
        closed_loop=reg,
        closed_loop_blowup=blowup_time,
        eta_condition_ok=eta_ok,
        open_loop_verdict=verdict,
        u_norms=u_norms,
        u_distances=u_distances,
        convergence_ratio=float(ratios[-1]) if ratios.size else float("nan"),
    )


def ladder_summary_csv(sols: list, evidence: list, u_norms=None) -> str:
    """CSV: eps,u_norm_sq,theta_l2_dist,v_l2_dist (distances to next rung)."""
    lines = ["eps,u_norm_sq,theta_l2_dist,v_l2_dist"]
    norm_by_eps = {}
    if u_norms:
        norm_by_eps = {e: v for e, v, *_ in u_norms}
    dist_by_eps = {e: (dt, dv) for e, dt, dv in evidence}
    for s in sols:
        e = s.epsilon
        u = norm_by_eps.get(e)
        dt, dv = dist_by_eps.get(e, (None, None))
        fmt = lambda v: "nan" if v is None else f"{v:.17g}"
        lines.append(f"{e:.17g},{fmt(u)},{fmt(dt)},{fmt(dv)}")
    return "\n".join(lines) + "\n"


def strategy_csv(ws: WeakClosedLoopStrategy) -> str:
    """CSV dump of (Theta*, v*): s,theta_11..,v_det_1..,v_mod_profile."""
    g = ws.theta_star.grid
    th = ws.theta_star.values
    vd = ws.v_star_det.values
    m, n = th.shape[1], th.shape[2]
    cols = ["s"]
    cols += [f"theta_{i + 1}{j + 1}" for i in range(m) for j in range(n)]
    cols += [f"v_det_{i + 1}" for i in range(m)]
    cols.append("v_mod_profile")
    lines = [",".join(cols)]
    vm = ws.v_star_mod_profile.values if ws.v_star_mod_profile is not None else None
    for k, s in enumerate(g):
        row = [f"{s:.17g}"]
        row += [f"{v:.17g}" for v in th[k].reshape(-1)]
        row += [f"{v:.17g}" for v in vd[k]]
        row.append(f"{vm[k][0]:.17g}" if vm is not None else "")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
