"""Euler-Maruyama Monte Carlo for the controlled state equation.

The scheme is

    X_{k+1} = X_k + (A X_k + B u_k + b_k) dt + (C X_k + D u_k + sigma_k) dW_k

on a uniform grid of [t, T].  Path i draws its Brownian increments from a
dedicated counter-based stream: a Philox bit generator keyed by the 128-bit
pair (master_seed, i).  Draw 0 seeds W(t) for t > 0; draws 1..N are the
increments.  Paths are therefore independent of how work is blocked, and all
reductions run over full per-path arrays in fixed order, so results cannot
depend on a worker or block count.  Two runs with the same master seed share
Brownian increments exactly, which is what couples controls under common
random numbers.

Martingale-modulated quantities evaluate M(s_k) = exp(gamma W_k - gamma^2
s_k / 2) from the same path's W.  Feedback controls are applied up to
T - truncation_delta and held at their last value afterwards: a weak
closed-loop strategy may be singular at T while its outcome stays square
integrable, so the simulator sweeps the hold gap down instead of stepping
into the singularity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.random import Generator, Philox

from .core import GridFn
from .errors import EnsembleError, InvalidInputError, WrongClassError
from .problem import InitialPair, NamedProfile, SLQProblem

__all__ = [
    "MonteCarloConfig",
    "ControlSpec",
    "MonteCarloEstimate",
    "PathEnsemble",
    "CoupledEnsembles",
    "simulate_ensemble",
    "simulate_coupled",
    "estimate_cost",
    "control_norm",
    "terminal_moment",
    "moment_oracle",
    "feedback_control",
    "estimate_csv_row",
    "ESTIMATE_CSV_HEADER",
]

MASK64 = (1 << 64) - 1
DEFAULT_BLOCK = 8192


@dataclass(frozen=True)
class MonteCarloConfig:
    """Simulation sizes, master seed and the feedback truncation gap."""

    paths: int
    steps: int
    master_seed: int
    truncation_delta: float = 0.0

    def __post_init__(self):
        if self.paths < 1:
            raise InvalidInputError("paths must be positive")
        if self.steps < 16:
            raise InvalidInputError("steps must be >= 16")
        if self.truncation_delta < 0.0:
            raise InvalidInputError("truncation_delta must be nonnegative")
        object.__setattr__(self, "master_seed", int(self.master_seed) & MASK64)


@dataclass(frozen=True, eq=False)
class ControlSpec:
    """One of: zero, a deterministic open-loop grid, a modulated open-loop
    profile, or feedback u = Theta X + v_det + v_mod * M(s)."""

    kind: str  # zero | open-loop-grid | open-loop-modulated | feedback
    u_det: Optional[GridFn] = None
    u_mod_profile: Optional[GridFn] = None
    theta: Optional[GridFn] = None
    v_det: Optional[GridFn] = None
    v_mod_profile: Optional[GridFn] = None
    gamma: Optional[float] = None

    @staticmethod
    def zero() -> "ControlSpec":
        return ControlSpec(kind="zero")

    @staticmethod
    def open_loop(u: GridFn) -> "ControlSpec":
        return ControlSpec(kind="open-loop-grid", u_det=u)

    @staticmethod
    def open_loop_modulated(profile: GridFn, gamma: float, det: Optional[GridFn] = None) -> "ControlSpec":
        return ControlSpec(kind="open-loop-modulated", u_mod_profile=profile, gamma=float(gamma), u_det=det)

    @staticmethod
    def feedback(theta: GridFn, v_det: GridFn, v_mod_profile: Optional[GridFn] = None,
                 gamma: Optional[float] = None) -> "ControlSpec":
        return ControlSpec(kind="feedback", theta=theta, v_det=v_det,
                           v_mod_profile=v_mod_profile,
                           gamma=None if gamma is None else float(gamma))

    def needs_gamma(self) -> bool:
        return self.u_mod_profile is not None or self.v_mod_profile is not None


def feedback_control(sol) -> ControlSpec:
    """Build a feedback ControlSpec from a PerturbedSolution or a
    WeakClosedLoopStrategy."""
    if hasattr(sol, "theta_star"):
        return ControlSpec.feedback(sol.theta_star, sol.v_star_det, sol.v_star_mod_profile, sol.gamma)
    return ControlSpec.feedback(sol.theta, sol.v_det, sol.v_mod_profile, sol.gamma)


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    std_error: float
    paths: int
    quantity: str  # cost | control-norm-squared | terminal-moment
    steps: int
    seed: int


ESTIMATE_CSV_HEADER = "quantity,mean,std_error,paths,steps,seed"


def estimate_csv_row(est: MonteCarloEstimate) -> str:
    return (
        f"{est.quantity},{est.mean:.17g},{est.std_error:.17g},"
        f"{est.paths},{est.steps},{est.seed}"
    )


@dataclass(eq=False)
class PathEnsemble:
    """Per-path reductions of one simulated ensemble.

    Full paths are not kept unless ``record_paths`` was requested; the cost
    integral, control norm and terminal state per path are all downstream
    consumers need.
    """

    problem: SLQProblem
    ip: InitialPair
    ctrl: ControlSpec
    cfg: MonteCarloConfig
    cost: np.ndarray  # (M,) terminal + running cost per path
    control_norm_sq: np.ndarray  # (M,) int |u|^2 per path
    X_T: np.ndarray  # (M, n)
    blown: np.ndarray  # (M,) bool
    recorded: Optional[dict] = None


@dataclass(eq=False)
class CoupledEnsembles:
    """K controls simulated on shared noise (common random numbers)."""

    problem: SLQProblem
    ip: InitialPair
    controls: list
    cfg: MonteCarloConfig
    cost: np.ndarray  # (K, M)
    control_norm_sq: np.ndarray  # (K, M)
    pair_dist_sq: np.ndarray  # (K-1, M) int |u_i - u_{i+1}|^2 per path

    @property
    def control_norm_mean(self):
        return self.control_norm_sq.mean(axis=1)

    @property
    def control_norm_se(self):
        M = self.control_norm_sq.shape[1]
        return self.control_norm_sq.std(axis=1, ddof=1) / np.sqrt(M)

    @property
    def pair_dist_mean(self):
        return self.pair_dist_sq.mean(axis=1)


def _path_block_normals(master_seed: int, start: int, count: int, draws: int) -> np.ndarray:
    out = np.empty((count, draws))
    for i in range(count):
        gen = Generator(Philox(key=np.array([master_seed, (start + i) & MASK64], dtype=np.uint64)))
        out[i] = gen.standard_normal(draws)
    return out


class _ControlEval:
    """Per-node tables for one control on the simulation grid."""

    def __init__(self, ctrl: ControlSpec, p: SLQProblem, s_nodes: np.ndarray, cutoff: float):
        N = s_nodes.size - 1
        m = p.m
        self.kind = ctrl.kind
        self.gamma = ctrl.gamma
        self.hold_index = N  # first node index at which the control is held
        if ctrl.kind == "zero":
            self.u_det = np.zeros((N + 1, m))
            self.u_prof = None
        elif ctrl.kind == "open-loop-grid":
            self.u_det = ctrl.u_det(s_nodes).reshape(N + 1, m)
            self.u_prof = None
        elif ctrl.kind == "open-loop-modulated":
            self.u_det = (
                ctrl.u_det(s_nodes).reshape(N + 1, m)
                if ctrl.u_det is not None
                else np.zeros((N + 1, m))
            )
            self.u_prof = ctrl.u_mod_profile(s_nodes).reshape(N + 1, m)
        elif ctrl.kind == "feedback":
            if ctrl.theta.grid[0] > s_nodes[0] + 1e-12:
                raise InvalidInputError("feedback grid starts after the initial time")
            eff_cut = min(cutoff, ctrl.theta.grid[-1])
            self.hold_index = int(np.searchsorted(s_nodes, eff_cut + 1e-12) - 1)
            self.hold_index = max(self.hold_index, 0)
            self.theta = ctrl.theta(s_nodes).reshape(N + 1, m, p.n)
            self.v_det = ctrl.v_det(s_nodes).reshape(N + 1, m)
            self.v_prof = (
                ctrl.v_mod_profile(s_nodes).reshape(N + 1, m)
                if ctrl.v_mod_profile is not None
                else None
            )
        else:
            raise InvalidInputError(f"unknown control kind {ctrl.kind!r}")

    def evaluate(self, k: int, X: np.ndarray, M_ctrl: Optional[np.ndarray], held: Optional[np.ndarray]):
        """Control values at node k for a block of states X (B, n)."""
        if self.kind == "feedback":
            if k > self.hold_index:
                return held, held
            u = X @ self.theta[k].T + self.v_det[k]
            if self.v_prof is not None:
                u = u + self.v_prof[k] * M_ctrl[:, None]
            return u, u
        if self.u_prof is not None:
            u = self.u_det[k] + self.u_prof[k] * M_ctrl[:, None]
            return u, held
        B = X.shape[0]
        return np.broadcast_to(self.u_det[k], (B, self.u_det.shape[1])), held


def _input_tables(p: SLQProblem, s_nodes: np.ndarray):
    """Deterministic node tables for coefficients, weights and inputs."""
    N = s_nodes.size - 1
    for name in ("sigma", "q", "rho"):
        if getattr(p, name).modulated is not None:
            raise WrongClassError("the simulator supports a modulated part on b only")
    tabs = {c: getattr(p, c)(s_nodes) for c in ("A", "B", "C", "D", "Q", "S", "R")}
    tabs["b_det"] = p.b.deterministic(s_nodes)
    tabs["sigma_det"] = p.sigma.deterministic(s_nodes)
    tabs["q_det"] = p.q.deterministic(s_nodes)
    tabs["rho_det"] = p.rho.deterministic(s_nodes)
    tabs["flags"] = {
        "Q": not p.Q.is_zero(),
        "S": not p.S.is_zero(),
        "R": not p.R.is_zero(),
        "q": not p.q.deterministic.is_zero(),
        "rho": not p.rho.deterministic.is_zero(),
        "b": not p.b.deterministic.is_zero(),
        "sigma": not p.sigma.deterministic.is_zero(),
    }
    tabs["has_running_cost"] = any(
        tabs["flags"][k] for k in ("Q", "S", "R", "q", "rho")
    )
    mod = p.b.modulated
    if mod is not None:
        # drift uses left endpoints only, so the profile is never evaluated
        # at a singular terminal node
        prof = np.zeros(N + 1)
        left = s_nodes[:-1]
        if isinstance(mod.profile, NamedProfile):
            prof[:-1] = mod.profile(left, p.T)
        else:
            prof[:-1] = np.asarray(mod.profile(left)).reshape(N)
        tabs["b_prof"] = prof
        tabs["b_gamma"] = float(mod.gamma)
    else:
        tabs["b_prof"] = None
        tabs["b_gamma"] = None
    return tabs


def _cost_integrand(tabs, k, X, u):
    f = tabs["flags"]
    val = np.zeros(X.shape[0])
    if f["Q"]:
        val += np.einsum("bi,bi->b", X @ tabs["Q"][k].T, X)
    if f["S"]:
        val += 2.0 * np.einsum("bi,bi->b", X @ tabs["S"][k].T, u)
    if f["R"]:
        val += np.einsum("bi,bi->b", u @ tabs["R"][k].T, u)
    if f["q"]:
        val += 2.0 * (X @ tabs["q_det"][k])
    if f["rho"]:
        val += 2.0 * (u @ tabs["rho_det"][k])
    return val


def _run_blocks(
    p: SLQProblem,
    ip: InitialPair,
    controls: list,
    cfg: MonteCarloConfig,
    block_size: int,
    record_paths: bool,
):
    if ip.x.size != p.n:
        raise InvalidInputError(f"initial state has length {ip.x.size}, expected {p.n}")
    if not (0.0 <= ip.t < p.T):
        raise InvalidInputError(f"initial time {ip.t} outside [0, T)")
    t, T, N = ip.t, p.T, cfg.steps
    dt = (T - t) / N
    s_nodes = t + dt * np.arange(N + 1)
    s_nodes[-1] = T
    tabs = _input_tables(p, s_nodes)
    cutoff = T - cfg.truncation_delta
    evals = [_ControlEval(c, p, s_nodes, cutoff) for c in controls]
    gammas = sorted({e.gamma for e in evals if e.gamma is not None} | (
        {tabs["b_gamma"]} if tabs["b_gamma"] is not None else set()
    ))

    K = len(controls)
    M = cfg.paths
    cost = np.zeros((K, M))
    unorm = np.zeros((K, M))
    pdist = np.zeros((K - 1, M)) if K > 1 else np.zeros((0, M))
    X_T = np.zeros((K, M, p.n))
    blown = np.zeros(M, dtype=bool)
    rec = None
    if record_paths:
        rec = {
            "s": s_nodes,
            "W": np.zeros((M, N + 1)),
            "X": np.zeros((K, M, N + 1, p.n)),
            "u": np.zeros((K, M, N + 1, p.m)),
        }

    sqrt_dt = np.sqrt(dt)
    sqrt_t = np.sqrt(t) if t > 0.0 else 0.0

    for start in range(0, M, block_size):
        Bn = min(block_size, M - start)
        z = _path_block_normals(cfg.master_seed, start, Bn, N + 1)
        W = sqrt_t * z[:, 0]
        dW = z[:, 1:] * sqrt_dt
        Xs = [np.broadcast_to(ip.x, (Bn, p.n)).copy() for _ in range(K)]
        held = [None] * K
        bad = np.zeros(Bn, dtype=bool)
        prev_cost = [None] * K
        prev_u = [None] * K
        prev_d = [None] * (K - 1) if K > 1 else []
        cost_acc = [np.zeros(Bn) for _ in range(K)]
        unorm_acc = [np.zeros(Bn) for _ in range(K)]
        dist_acc = [np.zeros(Bn) for _ in range(max(K - 1, 0))]

        for k in range(N + 1):
            s_k = s_nodes[k]
            M_by_gamma = {
                g: np.exp(g * W - 0.5 * g * g * s_k) for g in gammas
            }
            us = []
            has_cost = tabs["has_running_cost"]
            for i, ev in enumerate(evals):
                Mc = M_by_gamma.get(ev.gamma) if ev.gamma is not None else None
                u, held_i = ev.evaluate(k, Xs[i], Mc, held[i])
                held[i] = held_i
                us.append(u)
                phi_u = np.einsum("bi,bi->b", u, u)
                if has_cost:
                    phi_c = _cost_integrand(tabs, k, Xs[i], u)
                    if k > 0:
                        cost_acc[i] += 0.5 * dt * (prev_cost[i] + phi_c)
                    prev_cost[i] = phi_c
                if k > 0:
                    unorm_acc[i] += 0.5 * dt * (prev_u[i] + phi_u)
                prev_u[i] = phi_u
                if rec is not None:
                    rec["X"][i, start : start + Bn, k] = Xs[i]
                    rec["u"][i, start : start + Bn, k] = u
            for j in range(K - 1):
                d = us[j] - us[j + 1]
                phi_d = np.einsum("bi,bi->b", d, d)
                if k > 0:
                    dist_acc[j] += 0.5 * dt * (prev_d[j] + phi_d)
                prev_d[j] = phi_d
            if rec is not None:
                rec["W"][start : start + Bn, k] = W

            if k < N:
                f = tabs["flags"]
                A_k, B_k = tabs["A"][k], tabs["B"][k]
                C_k, D_k = tabs["C"][k], tabs["D"][k]
                has_D = bool(np.any(D_k != 0.0))
                dw = dW[:, k : k + 1]
                for i in range(K):
                    drift = Xs[i] @ A_k.T + us[i] @ B_k.T
                    if f["b"]:
                        drift = drift + tabs["b_det"][k]
                    if tabs["b_prof"] is not None:
                        drift = drift + (tabs["b_prof"][k] * M_by_gamma[tabs["b_gamma"]])[:, None]
                    diff = Xs[i] @ C_k.T
                    if has_D:
                        diff = diff + us[i] @ D_k.T
                    if f["sigma"]:
                        diff = diff + tabs["sigma_det"][k]
                    Xs[i] = Xs[i] + drift * dt + diff * dw
                    finite = np.isfinite(Xs[i]).all(axis=1) & (
                        np.abs(Xs[i]).max(axis=1) < 1e12
                    )
                    newly_bad = ~finite & ~bad
                    if np.any(newly_bad):
                        bad |= newly_bad
                    Xs[i][bad] = 0.0
                W = W + dW[:, k]

        sl = slice(start, start + Bn)
        G, g = p.G, p.g
        for i in range(K):
            term = np.einsum("bi,bi->b", Xs[i] @ G.T, Xs[i]) + 2.0 * (Xs[i] @ g)
            cost[i, sl] = cost_acc[i] + term
            unorm[i, sl] = unorm_acc[i]
            X_T[i, sl] = Xs[i]
        for j in range(K - 1):
            pdist[j, sl] = dist_acc[j]
        blown[sl] = bad

    frac = float(blown.mean())
    if frac > 0.01:
        raise EnsembleError(f"{100 * frac:.1f}% of paths left the finite regime")
    return s_nodes, cost, unorm, pdist, X_T, blown, rec


def simulate_ensemble(
    p: SLQProblem,
    ip: InitialPair,
    ctrl: ControlSpec,
    cfg: MonteCarloConfig,
    block_size: int = DEFAULT_BLOCK,
    record_paths: bool = False,
) -> PathEnsemble:
    """Simulate one control; returns per-path reductions.

    ``block_size`` only batches the work; results are bit-identical for any
    value because every path owns its RNG stream and reductions run over
    full per-path arrays.
    """
    _, cost, unorm, _, X_T, blown, rec = _run_blocks(
        p, ip, [ctrl], cfg, block_size, record_paths
    )
    return PathEnsemble(
        problem=p, ip=ip, ctrl=ctrl, cfg=cfg,
        cost=cost[0], control_norm_sq=unorm[0], X_T=X_T[0], blown=blown, recorded=rec,
    )


def simulate_coupled(
    p: SLQProblem,
    ip: InitialPair,
    controls: list,
    cfg: MonteCarloConfig,
    block_size: int = DEFAULT_BLOCK,
) -> CoupledEnsembles:
    """Simulate several controls on shared Brownian increments.

    Needed wherever pathwise differences between controls are meaningful
    only under common random numbers (the eps-ladder boundedness probe)."""
    _, cost, unorm, pdist, _, _, _ = _run_blocks(p, ip, controls, cfg, block_size, False)
    return CoupledEnsembles(
        problem=p, ip=ip, controls=list(controls), cfg=cfg,
        cost=cost, control_norm_sq=unorm, pair_dist_sq=pdist,
    )


def _check_match(ens, p: SLQProblem, ip: InitialPair):
    same = (
        ens.problem is p
        or (ens.problem.name == p.name and ens.problem.T == p.T and ens.problem.n == p.n)
    )
    if not same or ens.ip.t != ip.t or not np.array_equal(ens.ip.x, ip.x):
        raise InvalidInputError("ensemble was simulated for a different problem or initial pair")


def _estimate(values: np.ndarray, quantity: str, cfg: MonteCarloConfig) -> MonteCarloEstimate:
    M = values.size
    se = float(values.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return MonteCarloEstimate(
        mean=float(values.mean()), std_error=se, paths=M, quantity=quantity,
        steps=cfg.steps, seed=cfg.master_seed,
    )


def estimate_cost(p: SLQProblem, ip: InitialPair, ens: PathEnsemble) -> MonteCarloEstimate:
    """Mean and standard error of the quadratic cost over the ensemble."""
    _check_match(ens, p, ip)
    return _estimate(ens.cost, "cost", ens.cfg)


def control_norm(ens: PathEnsemble, ctrl: ControlSpec) -> MonteCarloEstimate:
    """Monte Carlo estimate of E int |u(s)|^2 ds for the simulated control."""
    if ens.ctrl is not ctrl:
        raise InvalidInputError("ensemble was simulated under a different control")
    return _estimate(ens.control_norm_sq, "control-norm-squared", ens.cfg)


def terminal_moment(ens: PathEnsemble) -> MonteCarloEstimate:
    """Monte Carlo estimate of E |X(T)|^2."""
    vals = np.einsum("bi,bi->b", ens.X_T, ens.X_T)
    return _estimate(vals, "terminal-moment", ens.cfg)


def _as_scalar_fn(f):
    if f is None:
        return lambda s: np.zeros_like(np.asarray(s, dtype=float))
    if isinstance(f, GridFn):
        return lambda s: np.asarray(f(s), dtype=float).reshape(np.asarray(s).shape)
    val = float(np.asarray(f).reshape(()))
    return lambda s: np.full_like(np.asarray(s, dtype=float), val)


def moment_oracle(p: SLQProblem, ip: InitialPair, theta=None, v=None, steps: int = 4096):
    """Exact first/second moment ODEs for scalar deterministic problems.

    Integrates (with mu = E[X], m2 = E[X^2], scalar feedback u = theta X + v)

        mu' = (A + B theta) mu + B v + b,
        m2' = 2 (A + B theta) m2 + 2 mu (B v + b)
              + (C + D theta)^2 m2 + 2 mu (C + D theta)(D v + sigma)
              + (D v + sigma)^2,

    forward with RK4 and assembles the cost from mu, m2 and the weights.
    Serves as the independent verification oracle for the Monte Carlo
    engine; no sampling is involved.  Returns (E[X(T)^2], cost).
    """
    if p.n != 1 or p.m != 1:
        raise WrongClassError("moment oracle requires a scalar problem")
    if p.has_modulated_input():
        raise WrongClassError("moment oracle requires deterministic inputs")
    th = _as_scalar_fn(theta)
    vf = _as_scalar_fn(v)

    t, T = ip.t, p.T
    h = (T - t) / steps
    times = t + h * np.arange(2 * steps + 1) / 2.0

    def at(c, s):
        return float(np.asarray(c(s)).reshape(()))

    def coef(s):
        A, B = at(p.A, s), at(p.B, s)
        C, D = at(p.C, s), at(p.D, s)
        b = at(p.b.deterministic, s)
        sig = at(p.sigma.deterministic, s)
        thv = float(th(np.asarray(s)))
        vv = float(vf(np.asarray(s)))
        return A + B * thv, B * vv + b, C + D * thv, D * vv + sig

    def rhs(s, y):
        mu, m2 = y
        a, bb, c, dd = coef(s)
        dmu = a * mu + bb
        dm2 = 2.0 * a * m2 + 2.0 * mu * bb + c * c * m2 + 2.0 * mu * c * dd + dd * dd
        return np.array([dmu, dm2])

    x0 = float(ip.x[0])
    y = np.array([x0, x0 * x0])
    mus = np.empty(steps + 1)
    m2s = np.empty(steps + 1)
    mus[0], m2s[0] = y
    for k in range(steps):
        s0 = t + k * h
        k1 = rhs(s0, y)
        k2 = rhs(s0 + h / 2, y + h / 2 * k1)
        k3 = rhs(s0 + h / 2, y + h / 2 * k2)
        k4 = rhs(s0 + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        mus[k + 1], m2s[k + 1] = y

    grid = t + h * np.arange(steps + 1)
    Q = np.array([at(p.Q, s) for s in grid])
    S = np.array([at(p.S, s) for s in grid])
    R = np.array([at(p.R, s) for s in grid])
    qv = np.array([at(p.q.deterministic, s) for s in grid])
    rv = np.array([at(p.rho.deterministic, s) for s in grid])
    thv = th(grid)
    vv = vf(grid)
    eu = thv * mus + vv                      # E[u]
    exu = thv * m2s + vv * mus               # E[X u]
    eu2 = thv**2 * m2s + 2 * thv * vv * mus + vv**2  # E[u^2]
    integrand = Q * m2s + 2 * S * exu + R * eu2 + 2 * qv * mus + 2 * rv * eu
    run = float(np.trapezoid(integrand, grid))
    G = float(p.G[0, 0])
    g = float(p.g[0])
    cost = G * m2s[-1] + 2 * g * mus[-1] + run
    return float(m2s[-1]), float(cost)
