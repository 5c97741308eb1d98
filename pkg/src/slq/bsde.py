"""Adjoint backward equation for the perturbed feedback construction.

Two input classes admit exact reductions of the adjoint pair (eta, zeta):

* deterministic inputs: zeta vanishes and eta solves a linear backward ODE,
  integrated with fixed-step RK4;
* scalar martingale-modulated drift b(s) = M(s) f(s) with
  M(s) = exp(gamma*W(s) - gamma^2 s/2): the ansatz eta = M*h, zeta =
  gamma*M*h turns the backward SDE into a deterministic scalar ODE for h,

      h' = -[(A + B*Th + gamma*(C + D*Th)) h + P f],   h(T) = 0.

The h equation is integrated with an exact-propagator product-integration
scheme: each backward step multiplies by exp(int a) and adds a Gauss-Legendre
quadrature of the forcing, with the substitution u = sqrt(T - s) on every
interval when the profile carries an inverse-square-root endpoint
singularity.  Plain RK4 loses several orders across that layer even when the
first step is handled analytically, which is why the product rule is used
throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import GridFn
from .errors import WrongClassError
from .problem import NamedProfile, RandomInput, SLQProblem
from .riccati import RiccatiSolution

__all__ = [
    "AdjointProfile",
    "solve_adjoint",
    "solve_adjoint_deterministic",
    "solve_adjoint_modulated",
    "adjoint_csv",
]

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True)
class AdjointProfile:
    """Deterministic description of the adjoint solution for one eps.

    Per-path values are reconstructed as ``eta(s) = deterministic_eta(s) +
    M(s) * modulated_h(s)`` and ``zeta(s) = gamma * M(s) * modulated_h(s)``;
    zeta is never stored separately, which keeps the reduction consistent by
    construction.
    """

    epsilon: float
    deterministic_eta: GridFn
    modulated_h: Optional[GridFn] = None
    gamma: Optional[float] = None

    def eta_det_at(self, s):
        return self.deterministic_eta(s)

    def h_at(self, s):
        if self.modulated_h is None:
            return np.zeros_like(np.asarray(s, dtype=float))
        return self.modulated_h(s)


def _theta_eps_scalar(P: RiccatiSolution, p: SLQProblem, s: np.ndarray) -> np.ndarray:
    """Vectorized perturbed feedback gain for scalar problems."""
    Pv = P.P(s).reshape(-1)
    B = p.B(s).reshape(-1)
    C = p.C(s).reshape(-1)
    D = p.D(s).reshape(-1)
    S = p.S(s).reshape(-1)
    R = p.R(s).reshape(-1)
    K = R + P.epsilon + D * Pv * D
    if P.epsilon == 0.0:
        out = np.zeros_like(K)
        nz = K != 0.0
        out[nz] = -(B[nz] * Pv[nz] + D[nz] * Pv[nz] * C[nz] + S[nz]) / K[nz]
        return out
    return -(B * Pv + D * Pv * C + S) / K


def solve_adjoint_deterministic(p: SLQProblem, P: RiccatiSolution, steps: int) -> AdjointProfile:
    """Backward RK4 for the adjoint ODE under purely deterministic inputs.

    With zeta identically zero the adjoint reduces to

        eta' = -[(A + B*Th)' eta + (C + D*Th)' P sigma + Th' rho + P b + q],

    with terminal value eta(T) = g, on a uniform grid of ``steps`` steps.
    """
    if p.has_modulated_input():
        raise WrongClassError(
            "problem has martingale-modulated inputs; use solve_adjoint_modulated"
        )
    from .strategy import theta_eps

    T = p.T
    h = T / steps
    half_times = np.linspace(0.0, T, 2 * steps + 1)
    n = p.n

    theta = np.empty((half_times.size, p.m, n))
    for j, s in enumerate(half_times):
        theta[j] = theta_eps(P, p, s)
    Pv = P.P(half_times)
    A = p.A(half_times)
    B = p.B(half_times)
    C = p.C(half_times)
    D = p.D(half_times)
    sig = p.sigma.deterministic(half_times)
    rho = p.rho.deterministic(half_times)
    qv = p.q.deterministic(half_times)
    bv = p.b.deterministic(half_times)

    # closed-loop matrix and forcing prepared once per evaluation time
    M_cl = np.empty((half_times.size, n, n))
    force = np.empty((half_times.size, n))
    for j in range(half_times.size):
        Th = theta[j]
        M_cl[j] = (A[j] + B[j] @ Th).T
        force[j] = (
            (C[j] + D[j] @ Th).T @ (Pv[j] @ sig[j])
            + Th.T @ rho[j]
            + Pv[j] @ bv[j]
            + qv[j]
        )

    def rhs(j: int, eta: np.ndarray) -> np.ndarray:
        return -(M_cl[j] @ eta + force[j])

    grid = np.linspace(0.0, T, steps + 1)
    values = np.empty((steps + 1, n))
    values[steps] = p.g
    eta = p.g.copy()
    for k in range(steps, 0, -1):
        j = 2 * k
        k1 = rhs(j, eta)
        k2 = rhs(j - 1, eta - 0.5 * h * k1)
        k3 = rhs(j - 1, eta - 0.5 * h * k2)
        k4 = rhs(j - 2, eta - h * k3)
        eta = eta - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        values[k - 1] = eta
    return AdjointProfile(epsilon=P.epsilon, deterministic_eta=GridFn(grid, values))


def _gauss_nodes(lo: np.ndarray, hi: np.ndarray):
    """Per-interval 4-point Gauss-Legendre nodes/weights, vectorized."""
    mid = 0.5 * (hi + lo)
    half = 0.5 * (hi - lo)
    nodes = mid[..., None] + half[..., None] * _GL_X
    weights = half[..., None] * _GL_W
    return nodes, weights


def solve_adjoint_modulated(p: SLQProblem, P: RiccatiSolution, steps: int) -> AdjointProfile:
    """Exact per-path reduction for a scalar problem with modulated drift.

    Requires n = m = 1, a modulated b, zero sigma/q/rho and zero terminal
    weight g.  Returns the deterministic profile h with eta = M*h and
    zeta = gamma*M*h.
    """
    if p.n != 1 or p.m != 1:
        raise WrongClassError("modulated reduction requires a scalar problem (n = m = 1)")
    if p.b.modulated is None:
        raise WrongClassError("b carries no modulated part; use solve_adjoint_deterministic")
    for name in ("sigma", "q", "rho"):
        inp: RandomInput = getattr(p, name)
        if not inp.is_zero():
            raise WrongClassError(f"modulated reduction requires {name} = 0")
    if not np.all(p.g == 0.0):
        raise WrongClassError("modulated reduction requires g = 0")

    T = p.T
    gamma = float(p.b.modulated.gamma)
    profile = p.b.modulated.profile
    grid = np.linspace(0.0, T, steps + 1)
    lo, hi = grid[:-1], grid[1:]

    def a_of(s: np.ndarray) -> np.ndarray:
        Th = _theta_eps_scalar(P, p, s)
        A = p.A(s).reshape(-1)
        B = p.B(s).reshape(-1)
        C = p.C(s).reshape(-1)
        D = p.D(s).reshape(-1)
        return A + B * Th + gamma * (C + D * Th)

    def P_of(s: np.ndarray) -> np.ndarray:
        return P.P(s).reshape(-1)

    # propagator exponents int_{lo_k}^{hi_k} a
    tau_nodes, tau_w = _gauss_nodes(lo, hi)
    Ia = np.sum(a_of(tau_nodes.reshape(-1)).reshape(tau_nodes.shape) * tau_w, axis=1)

    singular = isinstance(profile, NamedProfile) and profile.singular
    if singular:
        # substitute r = T - u^2: the forcing integrand becomes smooth in u
        u_lo = np.sqrt(np.maximum(T - hi, 0.0))
        u_hi = np.sqrt(np.maximum(T - lo, 0.0))
        u_nodes, u_w = _gauss_nodes(u_lo, u_hi)
        r_nodes = T - u_nodes**2
        dens = 2.0 * np.ones_like(u_nodes)
        f_smooth = profile.smooth_at(r_nodes.reshape(-1)).reshape(r_nodes.shape)
    else:
        r_nodes, u_w = _gauss_nodes(lo, hi)
        dens = np.ones_like(r_nodes)
        if isinstance(profile, NamedProfile):
            f_smooth = profile(r_nodes.reshape(-1), T).reshape(r_nodes.shape)
        else:
            f_smooth = profile(r_nodes.reshape(-1)).reshape(r_nodes.shape)

    # inner exponents int_{lo_k}^{r_{k,i}} a, one 4-point rule per (k, i)
    inner_lo = np.broadcast_to(lo[:, None], r_nodes.shape)
    in_nodes, in_w = _gauss_nodes(inner_lo, r_nodes)
    inner = np.sum(a_of(in_nodes.reshape(-1)).reshape(in_nodes.shape) * in_w, axis=2)

    g_vals = np.exp(inner) * P_of(r_nodes.reshape(-1)).reshape(r_nodes.shape) * f_smooth * dens
    F = np.sum(g_vals * u_w, axis=1)

    prop = np.exp(Ia)
    h = np.zeros(steps + 1)
    for k in range(steps - 1, -1, -1):
        h[k] = prop[k] * h[k + 1] + F[k]

    if p.b.deterministic.is_zero() and np.all(p.g == 0.0):
        det = GridFn(grid, np.zeros((steps + 1, 1)))
    else:
        # deterministic drift component superposes linearly with the
        # modulated one (zeta = 0 on this component)
        stripped = SLQProblem(
            n=p.n, m=p.m, T=p.T, A=p.A, B=p.B, C=p.C, D=p.D, Q=p.Q, S=p.S, R=p.R,
            G=p.G, g=p.g, b=RandomInput(deterministic=p.b.deterministic),
            sigma=p.sigma, q=p.q, rho=p.rho, name=p.name,
        )
        det = solve_adjoint_deterministic(stripped, P, steps).deterministic_eta
    return AdjointProfile(
        epsilon=P.epsilon,
        deterministic_eta=det,
        modulated_h=GridFn(grid, h),
        gamma=gamma,
    )


def solve_adjoint(p: SLQProblem, P: RiccatiSolution, steps: int) -> AdjointProfile:
    """Dispatch to the reduction matching the problem's input class."""
    if not p.has_modulated_input():
        return solve_adjoint_deterministic(p, P, steps)
    if p.b.modulated is not None and all(
        getattr(p, name).modulated is None for name in ("sigma", "q", "rho")
    ):
        return solve_adjoint_modulated(p, P, steps)
    raise WrongClassError("only the b input may carry a modulated part")


def adjoint_csv(adj: AdjointProfile) -> str:
    """CSV dump: s,eta_det_1..eta_det_n,h per node (h empty when absent)."""
    grid = adj.deterministic_eta.grid
    eta = adj.deterministic_eta.values
    n = eta.shape[1]
    header = "s," + ",".join(f"eta_det_{i + 1}" for i in range(n)) + ",h"
    lines = [header]
    h = adj.modulated_h(grid) if adj.modulated_h is not None else None
    for k, s in enumerate(grid):
        row = [f"{s:.17g}"] + [f"{v:.17g}" for v in eta[k]]
        row.append(f"{h[k]:.17g}" if h is not None else "")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
