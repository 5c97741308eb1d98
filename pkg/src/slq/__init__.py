"""Weak closed-loop strategies for stochastic linear-quadratic control.

The package solves finite-horizon SLQ problems whose generalized Riccati
equation has no regular solution: it perturbs the control weight by eps,
solves the perturbed Riccati and adjoint equations, runs a decreasing eps
ladder, extracts the weak closed-loop limit strategy, and verifies
optimality by Euler-Maruyama Monte Carlo against analytic oracles.
"""

from .core import GridFn, l2_norm, pinv, range_included
from .errors import (
    BlowUpError,
    DegeneratePerturbationError,
    EnsembleError,
    InvalidInputError,
    UnknownProblemError,
    WrongClassError,
)
from .problem import (
    CoefFn,
    InitialPair,
    Modulation,
    NamedProfile,
    RandomInput,
    SLQProblem,
    builtin,
    builtin_names,
    eval_coef,
    validate,
)
from .riccati import (
    RegularityReport,
    RiccatiSolution,
    check_regularity,
    solve_gre,
    solve_perturbed,
    theta_hat,
)
from .bsde import AdjointProfile, solve_adjoint, solve_adjoint_deterministic, solve_adjoint_modulated
from .strategy import (
    PerturbedSolution,
    SolvabilityReport,
    WeakClosedLoopStrategy,
    default_ladder,
    diagnose,
    extract_limit,
    run_ladder,
    theta_eps,
    v_eps_parts,
)
from .simulate import (
    ControlSpec,
    MonteCarloConfig,
    MonteCarloEstimate,
    PathEnsemble,
    control_norm,
    estimate_cost,
    feedback_control,
    moment_oracle,
    simulate_coupled,
    simulate_ensemble,
    terminal_moment,
)

__version__ = "0.1.0"
