"""Problem data for finite-horizon stochastic linear-quadratic control.

A problem bundles the state-equation coefficients A, B, C, D, the cost
weights Q, S, R, G, g and four inhomogeneous inputs b, sigma, q, rho.
Coefficients are deterministic (constant or time table).  Inputs are a
deterministic part plus an optional martingale-modulated part
``exp(gamma*W(s) - gamma^2 s/2) * f(s)`` with a deterministic scalar profile
f; the modulated class is restricted to scalar problems, where it admits an
exact deterministic reduction of the adjoint equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core import GridFn, is_symmetric
from .errors import InvalidInputError, UnknownProblemError

__all__ = [
    "CoefFn",
    "NamedProfile",
    "Modulation",
    "RandomInput",
    "SLQProblem",
    "InitialPair",
    "ValidationReport",
    "validate",
    "builtin",
    "builtin_names",
    "eval_coef",
    "named_profile",
    "NAMED_PROFILES",
]


@dataclass(frozen=True)
class CoefFn:
    """Deterministic time-dependent coefficient: a constant or a time table.

    Tables are interpolated linearly and clamped at their endpoints, so
    evaluation is defined on all of [0, T].
    """

    kind: str  # "constant" | "table"
    constant: Optional[np.ndarray] = None
    table: Optional[GridFn] = None

    def __post_init__(self):
        if self.kind == "constant":
            if self.constant is None:
                raise InvalidInputError("constant CoefFn needs a value")
            object.__setattr__(self, "constant", np.asarray(self.constant, dtype=float))
            if not np.all(np.isfinite(self.constant)):
                raise InvalidInputError("constant coefficient has non-finite entries")
        elif self.kind == "table":
            if self.table is None:
                raise InvalidInputError("table CoefFn needs a GridFn")
        else:
            raise InvalidInputError(f"unknown CoefFn kind {self.kind!r}")

    @staticmethod
    def const(value) -> "CoefFn":
        return CoefFn(kind="constant", constant=np.asarray(value, dtype=float))

    @staticmethod
    def from_table(grid, values) -> "CoefFn":
        return CoefFn(kind="table", table=GridFn(np.asarray(grid, float), np.asarray(values, float)))

    @property
    def shape(self) -> tuple:
        if self.kind == "constant":
            return self.constant.shape
        return self.table.value_shape

    def __call__(self, s):
        if self.kind == "constant":
            s_arr = np.asarray(s, dtype=float)
            if s_arr.ndim == 0:
                return self.constant.copy()
            return np.broadcast_to(self.constant, (s_arr.size,) + self.constant.shape).copy()
        return self.table(s)

    def is_zero(self) -> bool:
        if self.kind == "constant":
            return bool(np.all(self.constant == 0.0))
        return bool(np.all(self.table.values == 0.0))


@dataclass(frozen=True)
class NamedProfile:
    """Closed-form scalar profile, possibly with an inverse-square-root
    singularity at the horizon.

    The profile value is ``smooth(s) / sqrt(T - s)`` when ``singular`` and
    plain ``smooth(s)`` otherwise.  Singular profiles must be closed-form so
    the adjoint solver can integrate across the endpoint layer exactly;
    tables cannot represent the singularity.
    """

    name: str
    smooth: Callable[[np.ndarray], np.ndarray]
    singular: bool = True

    def smooth_at(self, s):
        return self.smooth(np.asarray(s, dtype=float))

    def __call__(self, s, T: float):
        s_arr = np.asarray(s, dtype=float)
        val = self.smooth(s_arr)
        if self.singular:
            gap = T - s_arr
            with np.errstate(divide="ignore"):
                val = val / np.sqrt(np.maximum(gap, 0.0))
        return val


NAMED_PROFILES = {
    # e^{-s} / sqrt(T - s): exponential decay against an inverse-square-root
    # endpoint layer.  With gamma = sqrt(2) this is the modulated drift of the
    # built-in "example-5.1" problem.
    "exp-inv-sqrt-gap": NamedProfile(
        "exp-inv-sqrt-gap", smooth=lambda s: np.exp(-s), singular=True
    ),
    # 1 / sqrt(T - s)
    "inv-sqrt-gap": NamedProfile("inv-sqrt-gap", smooth=lambda s: np.ones_like(s), singular=True),
}


def named_profile(name: str) -> NamedProfile:
    try:
        return NAMED_PROFILES[name]
    except KeyError:
        raise UnknownProblemError(f"unknown named profile {name!r}") from None


Profile = Union[CoefFn, NamedProfile]


@dataclass(frozen=True)
class Modulation:
    gamma: float
    profile: Profile

    def profile_at(self, s, T: float):
        if isinstance(self.profile, NamedProfile):
            return self.profile(s, T)
        return self.profile(s)


@dataclass(frozen=True)
class RandomInput:
    """Inhomogeneous input: deterministic part + optional modulated part."""

    deterministic: CoefFn
    modulated: Optional[Modulation] = None

    @staticmethod
    def zero(dim: int) -> "RandomInput":
        return RandomInput(deterministic=CoefFn.const(np.zeros(dim)))

    def is_zero(self) -> bool:
        return self.deterministic.is_zero() and self.modulated is None


@dataclass(frozen=True)
class SLQProblem:
    """Full problem datum for one SLQ control problem on [0, T]."""

    n: int
    m: int
    T: float
    A: CoefFn
    B: CoefFn
    C: CoefFn
    D: CoefFn
    Q: CoefFn
    S: CoefFn
    R: CoefFn
    G: np.ndarray
    g: np.ndarray
    b: RandomInput
    sigma: RandomInput
    q: RandomInput
    rho: RandomInput
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float).reshape(self.n, self.n))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float).reshape(self.n))

    def has_modulated_input(self) -> bool:
        return any(
            inp.modulated is not None for inp in (self.b, self.sigma, self.q, self.rho)
        )

    def inputs_all_zero(self) -> bool:
        return (
            self.b.is_zero()
            and self.sigma.is_zero()
            and self.q.is_zero()
            and self.rho.is_zero()
            and bool(np.all(self.g == 0.0))
        )


@dataclass(frozen=True)
class InitialPair:
    t: float
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if not np.all(np.isfinite(self.x)):
            raise InvalidInputError("initial state has non-finite entries")


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str):
        self.violations.append(message)


_COEF_SHAPES = {
    "A": ("n", "n"),
    "B": ("n", "m"),
    "C": ("n", "n"),
    "D": ("n", "m"),
    "Q": ("n", "n"),
    "S": ("m", "n"),
    "R": ("m", "m"),
}

_INPUT_LENGTHS = {"b": "n", "sigma": "n", "q": "n", "rho": "m"}


def _probe_profile_integrable(mod: Modulation, T: float) -> bool:
    # Trapezoid integral of |f| on refining grids of [0, T - 1e-6]; accept if
    # the last refinement moves the value by under 1% relative.
    upper = T - 1e-6
    prev = None
    for k in range(4):
        grid = np.linspace(0.0, upper, 2000 * 2**k + 1)
        vals = np.abs(mod.profile_at(grid, T))
        if not np.all(np.isfinite(vals)):
            return False
        integral = float(np.trapezoid(vals, grid))
        if prev is not None and abs(integral - prev) <= 1e-2 * max(1.0, abs(integral)):
            return True
        prev = integral
    return False


def validate(p: SLQProblem) -> ValidationReport:
    """Check shapes, symmetry, finiteness and modulated-profile integrability.

    Never raises; every finding is a line in the report.
    """
    report = ValidationReport()
    dims = {"n": p.n, "m": p.m}
    if p.n < 1 or p.m < 1:
        report.add("state and control dimensions must be positive")
        return report
    if not (p.T > 0.0):
        report.add("horizon T must be positive")

    for cname, want in _COEF_SHAPES.items():
        coef: CoefFn = getattr(p, cname)
        want_shape = (dims[want[0]], dims[want[1]])
        if coef.shape != want_shape:
            report.add(f"{cname} has shape {coef.shape}, expected {want_shape}")
        if coef.kind == "table":
            tab = coef.table
            if tab.grid[0] < -1e-12 or tab.grid[-1] > p.T + 1e-12:
                report.add(f"{cname} table spans outside [0, T]")

    for cname in ("Q", "R"):
        coef: CoefFn = getattr(p, cname)
        vals = coef.constant[None] if coef.kind == "constant" else coef.table.values
        if vals.shape[-1] == vals.shape[-2]:
            if not np.allclose(vals, np.swapaxes(vals, -1, -2), atol=0.0):
                report.add(f"{cname} not symmetric")
    if not is_symmetric(p.G):
        report.add("G not symmetric")

    for iname, want in _INPUT_LENGTHS.items():
        inp: RandomInput = getattr(p, iname)
        want_shape = (dims[want],)
        if inp.deterministic.shape != want_shape:
            report.add(f"{iname} deterministic part has shape {inp.deterministic.shape}, expected {want_shape}")
        mod = inp.modulated
        if mod is None:
            continue
        if p.n != 1:
            report.add(f"{iname}: modulated inputs require scalar state (n=1), got n={p.n}")
            continue
        if not _probe_profile_integrable(mod, p.T):
            report.add(f"{iname}: modulated profile failed the integrability probe on [0, T)")
    return report


def eval_coef(p: SLQProblem, which: str, s) -> np.ndarray:
    """Evaluate a named coefficient of the problem at time(s) s in [0, T]."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < -1e-12) or np.any(s_arr > p.T + 1e-12):
        raise InvalidInputError(f"time {s} outside [0, {p.T}]")
    if which not in _COEF_SHAPES:
        raise InvalidInputError(f"unknown coefficient {which!r}")
    return getattr(p, which)(s)


def _scalar_problem(name, T, A, B, C, D, Q, S, R, G, b=None, **kw) -> SLQProblem:
    zero = RandomInput.zero(1)
    return SLQProblem(
        n=1,
        m=1,
        T=T,
        A=CoefFn.const([[A]]),
        B=CoefFn.const([[B]]),
        C=CoefFn.const([[C]]),
        D=CoefFn.const([[D]]),
        Q=CoefFn.const([[Q]]),
        S=CoefFn.const([[S]]),
        R=CoefFn.const([[R]]),
        G=np.array([[G]], dtype=float),
        g=np.zeros(1),
        b=b if b is not None else zero,
        sigma=zero,
        q=zero,
        rho=zero,
        name=name,
        **kw,
    )


def builtin_names() -> list:
    return ["example-1.1", "example-5.1", "standard-scalar"]


def builtin(name: str):
    """Return a built-in (problem, default initial pair).

    - ``example-1.1``: dX = (-2X + u) ds + 2X dW on [0,1], cost E|X(1)|^2.
      Homogeneous; open-loop but not closed-loop solvable.
    - ``example-5.1``: dX = (-X + u + b) ds + sqrt(2) X dW on [0,1] with the
      modulated drift b(s) = exp(sqrt(2) W(s) - 2s) / sqrt(1-s), cost
      E|X(1)|^2.  Open-loop but not closed-loop solvable.
    - ``standard-scalar``: dX = u ds on [0,1], cost E[X(1)^2 + int u^2].
      Uniformly convex control weight; closed-loop solvable.
    """
    if name == "example-1.1":
        p = _scalar_problem(name, T=1.0, A=-2.0, B=1.0, C=2.0, D=0.0, Q=0.0, S=0.0, R=0.0, G=1.0)
        return p, InitialPair(t=0.0, x=np.array([1.0]))
    if name == "example-5.1":
        gamma = math.sqrt(2.0)
        # gamma^2/2 = 1, so exp(gamma W - gamma^2 s/2) * e^{-s}/sqrt(1-s)
        # equals exp(sqrt(2) W(s) - 2s)/sqrt(1-s) identically.
        b = RandomInput(
            deterministic=CoefFn.const(np.zeros(1)),
            modulated=Modulation(gamma=gamma, profile=named_profile("exp-inv-sqrt-gap")),
        )
        p = _scalar_problem(name, T=1.0, A=-1.0, B=1.0, C=gamma, D=0.0, Q=0.0, S=0.0, R=0.0, G=1.0, b=b)
        return p, InitialPair(t=0.0, x=np.array([1.0]))
    if name == "standard-scalar":
        p = _scalar_problem(name, T=1.0, A=0.0, B=1.0, C=0.0, D=0.0, Q=0.0, S=0.0, R=1.0, G=1.0)
        return p, InitialPair(t=0.0, x=np.array([1.0]))
    raise UnknownProblemError(f"unknown built-in problem {name!r}")
