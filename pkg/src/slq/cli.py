"""Command-line entry point.

Subcommands: ``solve`` (eps-ladder + weak limit extraction), ``diagnose``
(closed-loop / open-loop / weak closed-loop verdicts), ``simulate`` (Monte
Carlo cost of a chosen control), ``verify-example`` (acceptance checks for a
built-in problem).  All numeric output uses 17 significant digits so doubles
round-trip; files are written atomically via rename, and nothing is written
when a run fails.

Defaults can be placed in a config file of ``key = value`` lines (keys match
the long flag names with dashes replaced by underscores); explicit flags
override the file.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import BlowUpError
from .problem import InitialPair, builtin, builtin_names, validate
from .problemfile import load_problem
from .riccati import check_regularity, riccati_csv, solve_gre
from .simulate import (
    ControlSpec,
    MonteCarloConfig,
    control_norm,
    estimate_cost,
    estimate_csv_row,
    ESTIMATE_CSV_HEADER,
    feedback_control,
    simulate_ensemble,
    terminal_moment,
)
from .strategy import (
    default_ladder,
    diagnose,
    extract_limit,
    ladder_summary_csv,
    run_ladder,
    strategy_csv,
)
from . import verify as verify_mod

__all__ = ["main", "RunConfig"]


@dataclass
class RunConfig:
    command: str
    builtin: Optional[str] = None
    problem: Optional[str] = None
    t: Optional[float] = None  # None -> problem default (0 for files)
    x: Optional[str] = None
    eps_max: float = 1.0
    eps_min: Optional[float] = None  # None -> 2^-10 (solve), 2^-5 (diagnose)
    ladder_factor: float = 0.5
    steps: int = 2000
    delta: Optional[float] = None  # None -> 1e-2 * T
    tol: float = 1e-3
    paths: int = 0
    mc_steps: int = 1024
    seed: int = verify_mod.MASTER_SEED
    out: str = "."
    control: str = "feedback"
    dump_paths: bool = False


_FLOAT_KEYS = {"t", "eps_max", "eps_min", "ladder_factor", "delta", "tol"}
_INT_KEYS = {"steps", "paths", "mc_steps", "seed"}


def _read_config_file(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def _coerce(key: str, val):
    if isinstance(val, str):
        if key in _FLOAT_KEYS:
            return float(val)
        if key in _INT_KEYS:
            return int(val)
        if key == "dump_paths":
            return val.lower() in ("1", "true", "yes")
    return val


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    file_vals = _read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        if f.name in file_vals:
            setattr(cfg, f.name, _coerce(f.name, file_vals[f.name]))
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            setattr(cfg, f.name, flag_val)
    return cfg


def _load(cfg: RunConfig):
    if (cfg.builtin is None) == (cfg.problem is None):
        raise ValueError("give exactly one of --builtin or --problem")
    if cfg.builtin is not None:
        p, ip_default = builtin(cfg.builtin)
    else:
        p = load_problem(cfg.problem)
        ip_default = InitialPair(t=0.0, x=np.ones(p.n))
    report = validate(p)
    if not report.ok():
        raise ValueError("invalid problem: " + "; ".join(report.violations))
    t = cfg.t if cfg.t is not None else ip_default.t
    x = ip_default.x if cfg.x is None else np.array([float(v) for v in cfg.x.split(",")])
    return p, InitialPair(t=t, x=x)


def _write_atomic(out_dir: str, name: str, text: str):
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, os.path.join(out_dir, name))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _closed_loop_lines(p, steps: int) -> list:
    try:
        reg = check_regularity(solve_gre(p, steps), p)
        verdict = "solvable (regular)" if reg.is_regular() else "NOT solvable"
        detail = (
            f"positivity_ok={reg.positivity_ok} range_ok={reg.range_ok} "
            f"theta_hat_l2={reg.theta_hat_l2:.6g}"
        )
    except BlowUpError as exc:
        verdict = "NOT solvable"
        detail = f"generalized Riccati flow blew up near s={exc.time:.6g}"
    return [f"closed-loop: {verdict}", f"  {detail}"]


def _cmd_solve(cfg: RunConfig) -> int:
    p, ip = _load(cfg)
    delta = cfg.delta if cfg.delta is not None else 1e-2 * p.T
    eps_min = cfg.eps_min if cfg.eps_min is not None else 2.0**-10
    ladder = default_ladder(cfg.eps_max, eps_min, cfg.ladder_factor)
    sols = run_ladder(p, ladder, cfg.steps)
    ws = extract_limit(sols, delta=delta, tol=cfg.tol)

    u_norms = None
    if cfg.paths > 0:
        from .simulate import simulate_coupled

        mc = MonteCarloConfig(paths=cfg.paths, steps=cfg.mc_steps, master_seed=cfg.seed)
        cpl = simulate_coupled(p, ip, [feedback_control(s) for s in sols], mc)
        u_norms = [
            (sols[i].epsilon, float(cpl.control_norm_mean[i]), float(cpl.control_norm_se[i]))
            for i in range(len(sols))
        ]

    files = {}
    for k, sol in enumerate(sols):
        files[f"riccati_eps_{k}.csv"] = riccati_csv(sol.P)
    files["strategy.csv"] = strategy_csv(ws)
    files["ladder_summary.csv"] = ladder_summary_csv(sols, ws.cauchy_evidence, u_norms)

    lines = [
        f"problem: {p.name or cfg.problem}",
        f"ladder: eps in [{ladder[-1]:.6g}, {ladder[0]:.6g}], {len(ladder)} rungs, "
        f"steps={cfg.steps}",
        f"extraction window: [0, {p.T - delta:.17g}] (delta={delta:.6g}), tol={cfg.tol:g}",
        f"extraction: {'converged' if ws.converged else 'inconclusive'}",
        "cauchy evidence (eps, theta distance, v distance):",
    ]
    for eps, dth, dv in ws.cauchy_evidence:
        lines.append(f"  {eps:.10g}, {dth:.6e}, {dv:.6e}")
    lines += _closed_loop_lines(p, cfg.steps)
    files["report.txt"] = "\n".join(lines) + "\n"

    for name, text in files.items():
        _write_atomic(cfg.out, name, text)
    print("\n".join(lines))
    return 0 if ws.converged else 2


def _cmd_diagnose(cfg: RunConfig) -> int:
    p, ip = _load(cfg)
    # deep ladders push the pathwise distance test under the discretization
    # noise floor, so diagnosis defaults to a shallower ladder than solve
    eps_min = cfg.eps_min if cfg.eps_min is not None else 2.0**-5
    ladder = default_ladder(cfg.eps_max, eps_min, cfg.ladder_factor)
    paths = cfg.paths if cfg.paths > 0 else 20_000
    mc = MonteCarloConfig(paths=paths, steps=cfg.mc_steps, master_seed=cfg.seed)
    rep = diagnose(p, ip, ladder, cfg.steps, mc)

    closed = "solvable (regular)" if rep.closed_loop_solvable() else "NOT solvable"
    open_v = {"solvable": "solvable", "not-solvable": "NOT solvable"}.get(
        rep.open_loop_verdict, "inconclusive"
    )
    verdicts = [
        f"closed-loop: {closed}",
        f"open-loop: {open_v}",
        f"weak-closed-loop: {open_v}",
    ]
    lines = list(verdicts)
    if rep.closed_loop_blowup is not None:
        lines.append(f"  Riccati blow-up near s={rep.closed_loop_blowup:.6g}")
    lines.append(
        f"  regularity: positivity_ok={rep.closed_loop.positivity_ok} "
        f"range_ok={rep.closed_loop.range_ok} theta_hat_l2={rep.closed_loop.theta_hat_l2:.6g}"
    )
    lines.append(f"  last u-distance ratio: {rep.convergence_ratio:.4f}")
    lines.append("  u-norms (eps, E int |u|^2, se): " + "; ".join(
        f"{e:.6g}: {v:.6g} +- {se:.2g}" for e, v, se in rep.u_norms
    ))

    csv_lines = ["eps,u_norm_sq,u_norm_se,u_l2_dist_to_next"]
    dist_by_eps = {e: d for e, d in rep.u_distances}
    for e, v, se in rep.u_norms:
        d = dist_by_eps.get(e)
        csv_lines.append(
            f"{e:.17g},{v:.17g},{se:.17g}," + (f"{d:.17g}" if d is not None else "nan")
        )

    _write_atomic(cfg.out, "solvability.csv", "\n".join(csv_lines) + "\n")
    _write_atomic(cfg.out, "report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_simulate(cfg: RunConfig) -> int:
    p, ip = _load(cfg)
    trunc = 0.0
    if cfg.control == "zero":
        ctrl = ControlSpec.zero()
    elif cfg.control == "feedback":
        eps_min = cfg.eps_min if cfg.eps_min is not None else 2.0**-10
        ladder = default_ladder(cfg.eps_max, eps_min, cfg.ladder_factor)
        sols = run_ladder(p, ladder, cfg.steps)
        trunc = cfg.delta if cfg.delta is not None else 1e-2 * p.T
        ws = extract_limit(sols, delta=trunc, tol=cfg.tol)
        ctrl = feedback_control(ws)
    else:
        raise ValueError(f"unknown control {cfg.control!r} (use zero or feedback)")

    mc = MonteCarloConfig(
        paths=cfg.paths if cfg.paths > 0 else 20_000,
        steps=cfg.mc_steps,
        master_seed=cfg.seed,
        truncation_delta=trunc,
    )
    ens = simulate_ensemble(p, ip, ctrl, mc, record_paths=cfg.dump_paths)
    rows = [ESTIMATE_CSV_HEADER]
    rows.append(estimate_csv_row(estimate_cost(p, ip, ens)))
    rows.append(estimate_csv_row(control_norm(ens, ctrl)))
    rows.append(estimate_csv_row(terminal_moment(ens)))
    _write_atomic(cfg.out, "ensemble.csv", "\n".join(rows) + "\n")
    if cfg.dump_paths and ens.recorded is not None:
        _write_atomic(cfg.out, "paths.csv", _paths_csv(ens))
    print("\n".join(rows))
    return 0


def _paths_csv(ens) -> str:
    rec = ens.recorded
    n = ens.X_T.shape[1]
    m = rec["u"].shape[3]
    header = "path,k,s,W," + ",".join(f"X_{i+1}" for i in range(n)) + "," + ",".join(
        f"u_{i+1}" for i in range(m)
    )
    lines = [header]
    s = rec["s"]
    for i in range(rec["W"].shape[0]):
        for k in range(s.size):
            row = [str(i), str(k), f"{s[k]:.17g}", f"{rec['W'][i, k]:.17g}"]
            row += [f"{v:.17g}" for v in rec["X"][0, i, k]]
            row += [f"{v:.17g}" for v in rec["u"][0, i, k]]
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _cmd_verify(args) -> int:
    name = args.example
    try:
        cids = verify_mod.criteria_for(name)
    except KeyError:
        print(f"unknown example {name!r}; choose from {builtin_names()}", file=sys.stderr)
        return 1
    all_ok = True
    for cid in cids:
        result = verify_mod.run_criterion(cid)
        print("\n".join(result.lines()), flush=True)
        all_ok &= result.passed
    print("verdict:", "ALL PASS" if all_ok else "FAILURES PRESENT")
    return 0 if all_ok else 1


def _add_common(sp: argparse.ArgumentParser):
    sp.add_argument("--builtin", help="built-in problem name")
    sp.add_argument("--problem", help="problem definition file")
    sp.add_argument("--config", help="config file of key = value defaults")
    sp.add_argument("--t", type=float, help="initial time (default 0)")
    sp.add_argument("--x", help="initial state, comma-separated")
    sp.add_argument("--eps-max", dest="eps_max", type=float, help="ladder start (default 1)")
    sp.add_argument("--eps-min", dest="eps_min", type=float, help="ladder end (default 2^-10)")
    sp.add_argument("--ladder-factor", dest="ladder_factor", type=float,
                    help="geometric ladder factor in (0,1) (default 0.5)")
    sp.add_argument("--steps", type=int, help="solver grid steps (default 2000)")
    sp.add_argument("--delta", type=float, help="truncation gap (default 1e-2*T)")
    sp.add_argument("--tol", type=float, help="extraction tolerance (default 1e-3)")
    sp.add_argument("--paths", type=int, help="Monte Carlo paths")
    sp.add_argument("--mc-steps", dest="mc_steps", type=int, help="Monte Carlo time steps")
    sp.add_argument("--seed", type=int, help="64-bit master seed")
    sp.add_argument("--out", help="output directory (default .)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="slq",
        description="Weak closed-loop strategies for stochastic LQ control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="run the eps ladder and extract the weak limit")
    _add_common(sp)
    sp = sub.add_parser("diagnose", help="closed-loop/open-loop solvability verdicts")
    _add_common(sp)
    sp = sub.add_parser("simulate", help="Monte Carlo simulation of a control")
    _add_common(sp)
    sp.add_argument("--control", choices=["zero", "feedback"], help="control to simulate")
    sp.add_argument("--dump-paths", dest="dump_paths", action="store_true", default=None,
                    help="also write per-path trajectories (large)")
    sp = sub.add_parser("verify-example", help="run acceptance checks for a built-in")
    sp.add_argument("example", help="built-in name, e.g. example-5.1")

    args = parser.parse_args(argv)
    if args.command == "verify-example":
        return _cmd_verify(args)
    try:
        cfg = _build_config(args)
        if args.command == "solve":
            return _cmd_solve(cfg)
        if args.command == "diagnose":
            return _cmd_diagnose(cfg)
        if args.command == "simulate":
            return _cmd_simulate(cfg)
        raise ValueError(f"unknown command {args.command}")
    except Exception as exc:  # uniform error contract: message to stderr, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
