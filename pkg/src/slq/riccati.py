"""Backward integration of the perturbed and generalized Riccati equations.

Both flows share one right-hand side

    dP/ds = -[P A + A'P + C'P C + Q - L' K^{-1} L],    L = B'P + D'P C + S,

with K = R + eps*I + D'P D inverted exactly in the perturbed flow and
K = R + D'P D pseudo-inverted in the generalized flow.  Integration is
classical fixed-step RK4 from P(T) = G down to 0, symmetrizing after every
step; uniform grids keep downstream L2 norms and eps-comparisons
node-aligned.  Blow-up is detected and reported, not papered over: an
indefinite generalized equation may legitimately fail to have a global
solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GridFn, pinv, range_included, symmetrize
from .errors import BlowUpError, DegeneratePerturbationError, InvalidInputError
from .problem import SLQProblem

__all__ = [
    "RiccatiSolution",
    "RegularityReport",
    "solve_perturbed",
    "solve_gre",
    "theta_hat",
    "check_regularity",
    "riccati_csv",
]

BLOWUP_NORM = 1e12
COND_LIMIT = 1e14


@dataclass(frozen=True)
class RiccatiSolution:
    """Symmetric matrix flow P(.) on a uniform grid of [0, T].

    ``epsilon == 0`` marks the unperturbed generalized equation.  P(T) equals
    the terminal weight exactly; every stored node is exactly symmetric.
    """

    epsilon: float
    P: GridFn
    steps: int
    max_local_error_estimate: float
    max_step_asymmetry: float

    def at(self, s):
        return self.P(s)

    @property
    def grid(self) -> np.ndarray:
        return self.P.grid


def _coef_tables(p: SLQProblem, times: np.ndarray) -> dict:
    return {name: getattr(p, name)(times) for name in ("A", "B", "C", "D", "Q", "S", "R")}


def _gain_inner(cf: dict, j: int, P: np.ndarray, eps: float) -> tuple:
    """K = R + eps I + D'PD, L = B'P + D'PC + S, and the summand scale of K."""
    D = cf["D"][j]
    PD = P @ D
    DPD = D.T @ PD
    K = cf["R"][j] + DPD
    scale = float(np.abs(cf["R"][j]).max(initial=0.0) + np.abs(DPD).max(initial=0.0)) + eps
    if eps != 0.0:
        K = K + eps * np.eye(K.shape[0])
    L = cf["B"][j].T @ P + PD.T @ cf["C"][j] + cf["S"][j]
    return K, L, scale


def check_inner_invertible(K: np.ndarray, scale: float, eps: float, where: str):
    """Raise when R + eps I + D'PD is singular relative to its summands.

    The scale of the summands (not of K itself) measures cancellation: a
    tiny K produced by large cancelling terms means eps is too small for the
    given weights.
    """
    if K.shape[0] == 1:
        smin = smax = abs(float(K[0, 0]))
    else:
        ev = np.abs(np.linalg.eigvalsh(symmetrize(K)))
        smin, smax = float(ev.min()), float(ev.max())
    if smin <= max(smax, scale) / COND_LIMIT:
        raise DegeneratePerturbationError(
            f"R + {eps}*I + D'PD is numerically singular at {where}; increase eps"
        )


def _solve_backward(p: SLQProblem, eps: float, steps: int, pinv_rel_tol: float) -> RiccatiSolution:
    if steps < 16:
        raise InvalidInputError(f"steps must be >= 16, got {steps}")
    n = p.n
    h = p.T / steps
    grid = np.linspace(0.0, p.T, steps + 1)
    # RK4 evaluates at nodes and midpoints: index j on the half grid is
    # 2k for node k, odd for midpoints.
    half_times = np.linspace(0.0, p.T, 2 * steps + 1)
    cf = _coef_tables(p, half_times)
    perturbed = eps > 0.0

    def rhs(j: int, P: np.ndarray) -> np.ndarray:
        K, L, scale = _gain_inner(cf, j, P, eps if perturbed else 0.0)
        if perturbed:
            check_inner_invertible(K, scale, eps, f"s={half_times[j]:.6g}")
            if K.shape[0] == 1:
                gain = L.T @ L / K[0, 0]
            else:
                gain = L.T @ np.linalg.solve(K, L)
        else:
            gain = L.T @ (pinv(K, pinv_rel_tol) @ L)
        A, C, Q = cf["A"][j], cf["C"][j], cf["Q"][j]
        return -(P @ A + A.T @ P + C.T @ P @ C + Q - gain)

    def rk4_step(j_right: int, P: np.ndarray, step: float, j_stride: int) -> np.ndarray:
        # One backward step from half-grid index j_right to j_right - j_stride.
        j_mid = j_right - j_stride // 2
        j_left = j_right - j_stride
        k1 = rhs(j_right, P)
        k2 = rhs(j_mid, P - 0.5 * step * k1)
        k3 = rhs(j_mid, P - 0.5 * step * k2)
        k4 = rhs(j_left, P - step * k3)
        return P - (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    values = np.empty((steps + 1, n, n))
    values[steps] = symmetrize(np.asarray(p.G, dtype=float))
    P = values[steps].copy()
    max_asym = 0.0
    max_local_err = 0.0
    err_stride = max(1, steps // max(1, steps // 10))  # ~10% subsample
    for k in range(steps, 0, -1):
        j_right = 2 * k
        P_new = rk4_step(j_right, P, h, 2)
        if not np.all(np.isfinite(P_new)) or np.linalg.norm(P_new) > BLOWUP_NORM:
            raise BlowUpError(
                f"Riccati flow (eps={eps}) left the finite regime near s={grid[k - 1]:.6g}",
                time=grid[k - 1],
            )
        if k % err_stride == 0:
            # step-doubling local error estimate on a subsample of steps
            P_half = rk4_step(j_right, P, 0.5 * h, 1)
            P_half = rk4_step(j_right - 1, P_half, 0.5 * h, 1)
            max_local_err = max(max_local_err, float(np.linalg.norm(P_new - P_half)))
        asym = np.linalg.norm(P_new - P_new.T) / max(1.0, np.linalg.norm(P_new))
        max_asym = max(max_asym, float(asym))
        P = symmetrize(P_new)
        values[k - 1] = P
    return RiccatiSolution(
        epsilon=float(eps),
        P=GridFn(grid, values),
        steps=steps,
        max_local_error_estimate=max_local_err,
        max_step_asymmetry=max_asym,
    )


def solve_perturbed(p: SLQProblem, eps: float, steps: int) -> RiccatiSolution:
    """Integrate the eps-perturbed Riccati equation backward from P(T) = G.

    The inner matrix R + eps*I + D'PD is inverted exactly; for convex
    problems it stays >= eps*I along the flow, and a condition number above
    1e14 raises :class:`DegeneratePerturbationError`.

    The gain term scales like 1/eps, so the explicit integrator needs
    steps >~ T * |P| / eps for stability; too coarse a grid surfaces as a
    :class:`BlowUpError` rather than silent garbage.
    """
    if not (eps > 0.0):
        raise InvalidInputError(f"eps must be positive, got {eps}")
    return _solve_backward(p, eps, steps, pinv_rel_tol=1e-12)


def solve_gre(p: SLQProblem, steps: int, pinv_rel_tol: float = 1e-12) -> RiccatiSolution:
    """Integrate the generalized Riccati equation (pseudoinverse gain).

    Completes even when the solution exists but is not regular; finite-time
    blow-up raises :class:`BlowUpError` carrying the first bad node time.
    """
    return _solve_backward(p, 0.0, steps, pinv_rel_tol=pinv_rel_tol)


def theta_hat(P: RiccatiSolution, p: SLQProblem, s, pinv_rel_tol: float = 1e-12) -> np.ndarray:
    """Candidate feedback -(R + D'PD)^+ (B'P + D'PC + S) at time s."""
    Ps = P.at(s)
    D = p.D(s)
    K = p.R(s) + D.T @ Ps @ D
    L = p.B(s).T @ Ps + D.T @ Ps @ p.C(s) + p.S(s)
    return -pinv(K, pinv_rel_tol) @ L


@dataclass(frozen=True)
class RegularityReport:
    """Outcome of the three closed-loop regularity conditions.

    verdict is "regular" iff positivity, finite feedback L2 norm and the
    range-inclusion condition all hold on the solution grid.
    """

    positivity_ok: bool
    theta_hat_l2: float  # math.inf when the halving probe diverges
    range_ok: bool
    verdict: str

    def is_regular(self) -> bool:
        return self.verdict == "regular"


def _theta_hat_l2_probe(P: RiccatiSolution, p: SLQProblem, pinv_rel_tol: float) -> float:
    """L2 norm of theta_hat with a delta-halving divergence probe near T.

    A genuinely infinite int |theta_hat|^2 cannot be computed, so the norm
    over [0, T - delta] is tracked while delta halves from 1e-2 to 1e-5; if
    the last halving still grows the norm materially the value is flagged
    infinite.
    """
    T = p.T
    base_cut = T - 1e-2 * T
    base_grid = P.grid[P.grid <= base_cut]
    if base_grid.size < 2 or base_grid[-1] < base_cut - 1e-15:
        base_grid = np.append(base_grid, base_cut)
    th = np.array([theta_hat(P, p, s, pinv_rel_tol) for s in base_grid])
    sq = np.sum(th.reshape(base_grid.size, -1) ** 2, axis=1)
    base_sq = float(np.trapezoid(sq, base_grid))

    deltas = 1e-2 * T * 0.5 ** np.arange(0, 11)  # down to ~1e-5 T
    gaps = np.unique(np.concatenate([np.geomspace(deltas[-1], 1e-2 * T, 257), deltas]))
    tail_nodes = T - gaps[::-1]  # ascending times from base_cut to T - min(delta)
    th_tail = np.array([theta_hat(P, p, s, pinv_rel_tol) for s in tail_nodes])
    sq_tail = np.sum(th_tail.reshape(tail_nodes.size, -1) ** 2, axis=1)

    norms = []
    for d in deltas:
        mask = tail_nodes <= (T - d) + 1e-18
        tail_sq = float(np.trapezoid(sq_tail[mask], tail_nodes[mask])) if mask.sum() >= 2 else 0.0
        norms.append(float(np.sqrt(max(base_sq + tail_sq, 0.0))))
    if norms[-1] - norms[-2] > 0.02 * max(1.0, norms[-1]):
        return float("inf")
    return norms[-1]


def check_regularity(
    P: RiccatiSolution, p: SLQProblem, tol: float = 1e-9, pinv_rel_tol: float = 1e-12
) -> RegularityReport:
    """Test the three regularity conditions of a generalized Riccati solution.

    (a) min eigenvalue of R + D'PD >= -tol at every grid node,
    (b) trapezoid L2 norm of theta_hat finite under the delta-halving probe,
    (c) range(B'P + D'PC + S) contained in range(R + D'PD) at every node.
    """
    if tol <= 0.0:
        raise InvalidInputError(f"tol must be positive, got {tol}")
    grid = P.grid
    positivity_ok = True
    range_ok = True
    for k, s in enumerate(grid):
        Ps = P.P.values[k]
        D = p.D(s)
        K = p.R(s) + D.T @ Ps @ D
        L = p.B(s).T @ Ps + D.T @ Ps @ p.C(s) + p.S(s)
        if positivity_ok and float(np.linalg.eigvalsh(symmetrize(K)).min()) < -tol:
            positivity_ok = False
        if range_ok and not range_included(L, K, tol):
            range_ok = False
        if not positivity_ok and not range_ok:
            break
    l2 = _theta_hat_l2_probe(P, p, pinv_rel_tol)
    ok = positivity_ok and range_ok and np.isfinite(l2)
    return RegularityReport(
        positivity_ok=positivity_ok,
        theta_hat_l2=l2,
        range_ok=range_ok,
        verdict="regular" if ok else "not-regular",
    )


def riccati_csv(sol: RiccatiSolution) -> str:
    """CSV dump: header s,P_11,...,P_nn; one row per node; 17 digits."""
    n = sol.P.values.shape[1]
    header = "s," + ",".join(f"P_{i + 1}{j + 1}" for i in range(n) for j in range(n))
    lines = [header]
    for s, P in zip(sol.grid, sol.P.values):
        row = [f"{s:.17g}"] + [f"{v:.17g}" for v in P.reshape(-1)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
