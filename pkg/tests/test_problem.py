import math

import numpy as np
import pytest

from slq.errors import InvalidInputError, UnknownProblemError
from slq.problem import (
    CoefFn,
    Modulation,
    RandomInput,
    SLQProblem,
    builtin,
    builtin_names,
    eval_coef,
    named_profile,
    validate,
)


def test_builtin_example_11_coefficients():
    p, ip = builtin("example-1.1")
    assert eval_coef(p, "A", 0.3) == pytest.approx(-2.0)
    assert eval_coef(p, "C", 0.7) == pytest.approx(2.0)
    assert p.T == 1.0 and p.n == p.m == 1
    assert p.G[0, 0] == 1.0
    assert ip.t == 0.0


def test_builtin_example_51_coefficients():
    p, _ = builtin("example-5.1")
    for s in (0.0, 0.33, 1.0):
        assert eval_coef(p, "C", s)[0, 0] == pytest.approx(math.sqrt(2.0))
    assert eval_coef(p, "A", 0.5)[0, 0] == pytest.approx(-1.0)
    mod = p.b.modulated
    assert mod is not None
    # martingale normalization: gamma^2/2 = 1 makes the modulated drift equal
    # exp(sqrt(2) W(s) - 2s)/sqrt(1-s) with the recorded e^{-s} profile
    assert mod.gamma**2 / 2.0 == pytest.approx(1.0, abs=1e-15)
    assert mod.profile.name == "exp-inv-sqrt-gap"
    assert mod.profile(0.0, p.T) == pytest.approx(1.0)
    assert mod.profile(0.75, p.T) == pytest.approx(math.exp(-0.75) / math.sqrt(0.25))


def test_builtin_standard_scalar():
    p, _ = builtin("standard-scalar")
    for s in (0.0, 0.5, 1.0):
        assert eval_coef(p, "R", s)[0, 0] == pytest.approx(1.0)
    assert eval_coef(p, "A", 0.1)[0, 0] == 0.0
    assert p.inputs_all_zero()


def test_unknown_builtin():
    with pytest.raises(UnknownProblemError):
        builtin("example-9.9")
    with pytest.raises(UnknownProblemError):
        named_profile("no-such-profile")


def test_validate_builtins_clean():
    for name in builtin_names():
        p, _ = builtin(name)
        report = validate(p)
        assert report.ok(), report.violations


def test_validate_flags_nonsymmetric_q():
    p, _ = builtin("standard-scalar")
    bad = SLQProblem(
        n=2, m=1, T=1.0,
        A=CoefFn.const(np.zeros((2, 2))),
        B=CoefFn.const(np.ones((2, 1))),
        C=CoefFn.const(np.zeros((2, 2))),
        D=CoefFn.const(np.zeros((2, 1))),
        Q=CoefFn.const(np.array([[0.0, 1.0], [0.0, 0.0]])),
        S=CoefFn.const(np.zeros((1, 2))),
        R=CoefFn.const(np.eye(1)),
        G=np.eye(2), g=np.zeros(2),
        b=RandomInput.zero(2), sigma=RandomInput.zero(2),
        q=RandomInput.zero(2), rho=RandomInput.zero(1),
    )
    report = validate(bad)
    assert any("Q not symmetric" in v for v in report.violations)


def test_validate_rejects_modulation_on_vector_state():
    mod = Modulation(gamma=1.0, profile=named_profile("inv-sqrt-gap"))
    p = SLQProblem(
        n=2, m=1, T=1.0,
        A=CoefFn.const(np.zeros((2, 2))),
        B=CoefFn.const(np.ones((2, 1))),
        C=CoefFn.const(np.zeros((2, 2))),
        D=CoefFn.const(np.zeros((2, 1))),
        Q=CoefFn.const(np.zeros((2, 2))),
        S=CoefFn.const(np.zeros((1, 2))),
        R=CoefFn.const(np.eye(1)),
        G=np.eye(2), g=np.zeros(2),
        b=RandomInput(deterministic=CoefFn.const(np.zeros(2)), modulated=mod),
        sigma=RandomInput.zero(2), q=RandomInput.zero(2), rho=RandomInput.zero(1),
    )
    report = validate(p)
    assert any("scalar state" in v for v in report.violations)


def test_eval_coef_tables():
    p, _ = builtin("standard-scalar")
    tab = CoefFn.from_table([0.0, 1.0], np.array([[[0.0]], [[2.0]]]))
    q = SLQProblem(
        n=1, m=1, T=1.0, A=tab, B=p.B, C=p.C, D=p.D, Q=p.Q, S=p.S, R=p.R,
        G=p.G, g=p.g, b=p.b, sigma=p.sigma, q=p.q, rho=p.rho,
    )
    assert eval_coef(q, "A", 0.25)[0, 0] == pytest.approx(0.5)
    clamped = CoefFn.from_table([0.0, 0.5], np.array([[[1.0]], [[1.0]]]))
    q2 = SLQProblem(
        n=1, m=1, T=1.0, A=clamped, B=p.B, C=p.C, D=p.D, Q=p.Q, S=p.S, R=p.R,
        G=p.G, g=p.g, b=p.b, sigma=p.sigma, q=p.q, rho=p.rho,
    )
    assert eval_coef(q2, "A", 0.9)[0, 0] == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        eval_coef(q, "A", 1.5)


def test_table_evaluation_is_lipschitz():
    grid = np.array([0.0, 0.4, 1.0])
    vals = np.array([[[0.0]], [[2.0]], [[1.0]]])
    tab = CoefFn.from_table(grid, vals)
    slopes = [2.0 / 0.4, 1.0 / 0.6]
    L = max(slopes)
    rng = np.random.default_rng(11)
    for _ in range(200):
        s = rng.uniform(0.0, 1.0)
        h = rng.uniform(0.0, 1e-3)
        assert abs(tab(min(s + h, 1.0))[0, 0] - tab(s)[0, 0]) <= L * h + 1e-12
