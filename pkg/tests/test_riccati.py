import numpy as np
import pytest

from slq.errors import BlowUpError, DegeneratePerturbationError, InvalidInputError
from slq.problem import CoefFn, RandomInput, SLQProblem, builtin
from slq.riccati import (
    check_regularity,
    riccati_csv,
    solve_gre,
    solve_perturbed,
    theta_hat,
)


def scalar_problem(A=0.0, B=1.0, C=0.0, D=0.0, Q=0.0, S=0.0, R=0.0, G=1.0, T=1.0):
    zero = RandomInput.zero(1)
    return SLQProblem(
        n=1, m=1, T=T,
        A=CoefFn.const([[A]]), B=CoefFn.const([[B]]), C=CoefFn.const([[C]]),
        D=CoefFn.const([[D]]), Q=CoefFn.const([[Q]]), S=CoefFn.const([[S]]),
        R=CoefFn.const([[R]]), G=np.array([[G]]), g=np.zeros(1),
        b=zero, sigma=zero, q=zero, rho=zero,
    )


class TestPerturbed:
    def test_example_51_closed_form_values(self):
        p, _ = builtin("example-5.1")
        sol = solve_perturbed(p, 0.5, 2000)
        assert sol.at(0.5)[0, 0] == pytest.approx(0.5, abs=1e-10)
        sol1 = solve_perturbed(p, 1.0, 2000)
        assert sol1.at(0.0)[0, 0] == pytest.approx(0.5, abs=1e-10)

    def test_zero_fixed_point(self):
        p = scalar_problem(A=0.3, B=1.0, C=0.2, D=0.5, R=1.0, G=0.0)
        sol = solve_perturbed(p, 0.25, 64)
        assert np.all(sol.P.values == 0.0)

    def test_terminal_condition_exact(self):
        p, _ = builtin("example-5.1")
        sol = solve_perturbed(p, 0.5, 64)
        assert sol.at(p.T)[0, 0] == p.G[0, 0]

    def test_fourth_order_convergence(self):
        p, _ = builtin("example-5.1")
        eps = 0.5

        def max_err(steps):
            sol = solve_perturbed(p, eps, steps)
            s = sol.grid
            return np.max(np.abs(sol.P.values[:, 0, 0] - eps / (eps + 1.0 - s)))

        assert max_err(64) / max_err(128) >= 12.0

    def test_eps_monotone_on_example_51(self):
        p, _ = builtin("example-5.1")
        ladder = [1.0, 0.5, 0.25, 0.125]
        sols = [solve_perturbed(p, e, 256) for e in ladder]
        for hi, lo in zip(sols[:-1], sols[1:]):
            assert np.all(hi.P.values >= lo.P.values - 1e-12)

    def test_symmetry_enforced_and_drift_small(self):
        rng = np.random.default_rng(2)
        M = rng.standard_normal((2, 2))
        p = SLQProblem(
            n=2, m=1, T=1.0,
            A=CoefFn.const(rng.standard_normal((2, 2))),
            B=CoefFn.const(rng.standard_normal((2, 1))),
            C=CoefFn.const(rng.standard_normal((2, 2)) * 0.3),
            D=CoefFn.const(rng.standard_normal((2, 1)) * 0.3),
            Q=CoefFn.const(M @ M.T), S=CoefFn.const(rng.standard_normal((1, 2))),
            R=CoefFn.const(np.eye(1)), G=np.eye(2), g=np.zeros(2),
            b=RandomInput.zero(2), sigma=RandomInput.zero(2),
            q=RandomInput.zero(2), rho=RandomInput.zero(1),
        )
        sol = solve_perturbed(p, 0.5, 256)
        assert np.array_equal(sol.P.values, np.swapaxes(sol.P.values, 1, 2))
        assert sol.max_step_asymmetry <= 1e-10

    def test_eps_must_be_positive(self):
        p, _ = builtin("example-5.1")
        with pytest.raises(InvalidInputError):
            solve_perturbed(p, 0.0, 64)
        with pytest.raises(InvalidInputError):
            solve_perturbed(p, 0.5, 8)

    def test_degenerate_perturbation(self):
        # R = -0.5 cancels eps = 0.5 exactly: inner matrix is singular
        p = scalar_problem(R=-0.5, G=1.0)
        with pytest.raises(DegeneratePerturbationError):
            solve_perturbed(p, 0.5, 64)


class TestGRE:
    def test_example_11_constant_solution(self):
        p, _ = builtin("example-1.1")
        sol = solve_gre(p, 256)
        assert np.max(np.abs(sol.P.values - 1.0)) <= 1e-12

    def test_example_51_constant_solution(self):
        p, _ = builtin("example-5.1")
        sol = solve_gre(p, 256)
        assert np.max(np.abs(sol.P.values - 1.0)) <= 1e-12

    def test_standard_scalar_separable_solution(self):
        p, _ = builtin("standard-scalar")
        sol = solve_gre(p, 2000)
        assert sol.at(0.0)[0, 0] == pytest.approx(0.5, abs=1e-8)
        exact = 1.0 / (2.0 - sol.grid)
        assert np.max(np.abs(sol.P.values[:, 0, 0] - exact)) <= 1e-8

    def test_blowup_reported_with_time(self):
        # P' = P^2 with P(1) = -2 leaves the finite regime at s = 1/2
        p = scalar_problem(R=1.0, G=-2.0)
        with pytest.raises(BlowUpError) as exc_info:
            solve_gre(p, 4096)
        assert exc_info.value.time == pytest.approx(0.5, abs=0.01)


class TestThetaHat:
    def test_zero_when_inner_matrix_vanishes(self):
        p, _ = builtin("example-1.1")
        sol = solve_gre(p, 256)
        for s in (0.0, 0.37, 1.0):
            assert theta_hat(sol, p, s)[0, 0] == 0.0

    def test_standard_scalar_value(self):
        p, _ = builtin("standard-scalar")
        sol = solve_gre(p, 2000)
        assert theta_hat(sol, p, 0.0)[0, 0] == pytest.approx(-0.5, abs=1e-8)

    def test_zero_numerator(self):
        p = scalar_problem(A=0.5, B=0.0, C=0.1, D=0.0, Q=1.0, R=1.0, G=1.0)
        sol = solve_gre(p, 256)
        for s in (0.0, 0.5, 1.0):
            assert theta_hat(sol, p, s)[0, 0] == 0.0


class TestRegularity:
    def test_examples_fail_range_condition(self):
        for name in ("example-1.1", "example-5.1"):
            p, _ = builtin(name)
            rep = check_regularity(solve_gre(p, 512), p)
            assert not rep.range_ok
            assert rep.verdict == "not-regular"
            assert rep.positivity_ok  # failure is the range condition alone
            assert np.isfinite(rep.theta_hat_l2)

    def test_standard_scalar_regular(self):
        p, _ = builtin("standard-scalar")
        rep = check_regularity(solve_gre(p, 512), p)
        assert rep.verdict == "regular"
        # integral of (2-s)^-2 over [0,1] is 1/2
        assert rep.theta_hat_l2 == pytest.approx(np.sqrt(0.5), abs=1e-3)

    def test_l2_probe_flags_divergent_gain(self):
        # hand-built solution P = 1 against R(s) = 1 - s gives the gain
        # -1/(1-s), whose squared integral diverges at the horizon
        from slq.core import GridFn
        from slq.riccati import RiccatiSolution

        p = scalar_problem(B=1.0, G=1.0)
        tab = CoefFn.from_table([0.0, 1.0], np.array([[[1.0]], [[0.0]]]))
        q = SLQProblem(
            n=1, m=1, T=1.0, A=p.A, B=p.B, C=p.C, D=p.D, Q=p.Q, S=p.S, R=tab,
            G=p.G, g=p.g, b=p.b, sigma=p.sigma, q=p.q, rho=p.rho,
        )
        grid = np.linspace(0.0, 1.0, 257)
        sol = RiccatiSolution(
            epsilon=0.0,
            P=GridFn(grid, np.ones((257, 1, 1))),
            steps=256,
            max_local_error_estimate=0.0,
            max_step_asymmetry=0.0,
        )
        rep = check_regularity(sol, q)
        assert rep.theta_hat_l2 == np.inf
        assert rep.verdict == "not-regular"


def test_csv_dump_shape_and_precision():
    p, _ = builtin("example-5.1")
    sol = solve_perturbed(p, 0.5, 64)
    text = riccati_csv(sol)
    lines = text.strip().split("\n")
    assert lines[0] == "s,P_11"
    assert len(lines) == 66
    s_val = float(lines[33].split(",")[0])
    p_val = float(lines[33].split(",")[1])
    assert p_val == sol.P.values[32, 0, 0]  # 17 digits round-trips exactly
    assert s_val == sol.grid[32]
