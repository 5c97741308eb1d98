import numpy as np

from slq.cli import main

FAST_SOLVE = ["--steps", "200", "--eps-min", "0.125"]


def run(argv):
    return main([str(a) for a in argv])


def read(path):
    return path.read_text(encoding="utf-8")


class TestSolve:
    def test_standard_scalar_converges(self, tmp_path):
        rc = run(["solve", "--builtin", "standard-scalar", "--out", tmp_path,
                  "--steps", "400", "--eps-min", "3e-5"])
        assert rc == 0
        report = read(tmp_path / "report.txt")
        assert "extraction: converged" in report
        assert "closed-loop: solvable (regular)" in report
        # the regular feedback is -P/(R) with P = 1/(2-s)
        rows = read(tmp_path / "strategy.csv").strip().split("\n")[1:]
        s, theta = np.array([[float(v) for v in r.split(",")[:2]] for r in rows]).T
        assert np.max(np.abs(theta + 1.0 / (2.0 - s))) <= 1e-3

    def test_example_51_strategy_values(self, tmp_path):
        rc = run(["solve", "--builtin", "example-5.1", "--out", tmp_path,
                  "--steps", "2000", "--eps-min", 2.0**-10, "--delta", "0.1"])
        assert rc == 2  # spec tolerance declares this ladder depth inconclusive
        rows = read(tmp_path / "strategy.csv").strip().split("\n")[1:]
        table = {float(r.split(",")[0]): float(r.split(",")[1]) for r in rows}
        eps_min = 2.0**-10
        dev = eps_min / ((1.0 - 0.5) * (eps_min + 1.0 - 0.5))
        assert abs(table[0.5] + 2.0) <= 1.2 * dev + 1e-6
        for k in range(11):
            assert (tmp_path / f"riccati_eps_{k}.csv").exists()
        summary = read(tmp_path / "ladder_summary.csv").strip().split("\n")
        assert summary[0] == "eps,u_norm_sq,theta_l2_dist,v_l2_dist"
        assert len(summary) == 12

    def test_outputs_byte_identical_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["solve", "--builtin", "example-5.1", "--out", out,
                        *FAST_SOLVE, "--paths", "500", "--mc-steps", "64"]) == 2
        for name in ("strategy.csv", "ladder_summary.csv", "riccati_eps_0.csv", "report.txt"):
            assert read(a / name) == read(b / name), name

    def test_invalid_problem_writes_nothing(self, tmp_path):
        bad = tmp_path / "bad.slq"
        bad.write_text("[dims]\nn = 1\nm = 1\n", encoding="utf-8")
        out = tmp_path / "out"
        rc = run(["solve", "--problem", bad, "--out", out])
        assert rc == 1
        assert not out.exists() or not list(out.iterdir())

    def test_requires_exactly_one_source(self, tmp_path):
        assert run(["solve", "--out", tmp_path]) == 1
        assert run(["solve", "--builtin", "example-1.1", "--problem", "x.slq",
                    "--out", tmp_path]) == 1


class TestDiagnose:
    def test_example_51_verdict_lines(self, tmp_path):
        rc = run(["diagnose", "--builtin", "example-5.1", "--out", tmp_path,
                  "--steps", "1000", "--paths", "8000", "--mc-steps", "512"])
        assert rc == 0
        report = read(tmp_path / "report.txt").split("\n")
        assert report[0] == "closed-loop: NOT solvable"
        assert report[1] == "open-loop: solvable"
        assert report[2] == "weak-closed-loop: solvable"
        csv = read(tmp_path / "solvability.csv").strip().split("\n")
        assert csv[0].startswith("eps,u_norm_sq")
        assert len(csv) == 7  # default diagnose ladder 1 .. 2^-5

    def test_standard_scalar_regular(self, tmp_path):
        rc = run(["diagnose", "--builtin", "standard-scalar", "--out", tmp_path,
                  "--steps", "400", "--paths", "4000", "--mc-steps", "256"])
        assert rc == 0
        report = read(tmp_path / "report.txt").split("\n")
        assert report[0] == "closed-loop: solvable (regular)"
        assert report[1] == "open-loop: solvable"

    def test_linear_terminal_weight_not_solvable(self, tmp_path):
        # cost 2 g X(1) with free drift: value is -inf, u_eps = -g/eps blows
        # up at rate 4x per eps halving
        prob = tmp_path / "linear-terminal.slq"
        prob.write_text(
            "[dims]\nn = 1\nm = 1\n[horizon]\nT = 1\n"
            "[coef.B]\nconstant = 1\n[terminal]\nG = 0\ng = 1\n",
            encoding="utf-8",
        )
        rc = run(["diagnose", "--problem", prob, "--out", tmp_path,
                  "--steps", "200", "--paths", "2000", "--mc-steps", "64"])
        assert rc == 0
        report = read(tmp_path / "report.txt").split("\n")
        assert report[0] == "closed-loop: NOT solvable"
        assert report[1] == "open-loop: NOT solvable"
        assert report[2] == "weak-closed-loop: NOT solvable"


class TestSimulateCmd:
    def test_zero_control_summary(self, tmp_path):
        rc = run(["simulate", "--builtin", "example-1.1", "--control", "zero",
                  "--paths", "2000", "--mc-steps", "64", "--out", tmp_path])
        assert rc == 0
        rows = read(tmp_path / "ensemble.csv").strip().split("\n")
        assert rows[0] == "quantity,mean,std_error,paths,steps,seed"
        assert rows[1].startswith("cost,")
        assert rows[2].startswith("control-norm-squared,0,0,")

    def test_dump_paths(self, tmp_path):
        rc = run(["simulate", "--builtin", "example-1.1", "--control", "zero",
                  "--paths", "3", "--mc-steps", "16", "--out", tmp_path,
                  "--dump-paths"])
        assert rc == 0
        rows = read(tmp_path / "paths.csv").strip().split("\n")
        assert rows[0] == "path,k,s,W,X_1,u_1"
        assert len(rows) == 1 + 3 * 17


class TestVerifyExample:
    def test_unknown_example(self, capsys):
        assert run(["verify-example", "unknown-name"]) == 1
        assert "unknown example" in capsys.readouterr().err

    def test_standard_scalar_quick(self, capsys):
        # standard-scalar maps to the two cheap criteria only
        assert run(["verify-example", "standard-scalar"]) == 0
        out = capsys.readouterr().out
        assert "[criterion 2]" in out and "[criterion 3]" in out
        assert "ALL PASS" in out


class TestConfigFile:
    def test_file_supplies_defaults_flags_override(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("steps = 150\neps_min = 0.125\npaths = 0\n", encoding="utf-8")
        out1 = tmp_path / "o1"
        rc = run(["solve", "--builtin", "example-1.1", "--config", conf,
                  "--out", out1])
        assert rc in (0, 2)
        assert sum(1 for f in out1.iterdir() if f.name.startswith("riccati_eps_")) == 4
        out2 = tmp_path / "o2"
        rc = run(["solve", "--builtin", "example-1.1", "--config", conf,
                  "--eps-min", "0.25", "--out", out2])
        assert rc in (0, 2)
        assert sum(1 for f in out2.iterdir() if f.name.startswith("riccati_eps_")) == 3
