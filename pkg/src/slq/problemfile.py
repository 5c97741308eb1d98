"""Line-oriented problem definition files.

Format: UTF-8 text, ``key = value`` lines under ``[section]`` headers, with
``#`` comments.  Sections: ``[dims]`` (n, m), ``[horizon]`` (T),
``[coef.A]`` .. ``[coef.R]``, ``[terminal]`` (G, g), ``[input.b]`` ..
``[input.rho]``.  Matrices are semicolon-separated rows of comma-separated
reals ("1, 0; 0, 1").  A coefficient section holds either ``constant =
MATRIX`` or bare table lines ``t : MATRIX``.  Input sections hold
``deterministic = VECTOR`` (or ``deterministic = table`` followed by ``t :
VECTOR`` lines) plus, for modulated inputs, ``gamma = REAL`` and ``profile =
named:<id>`` or ``profile = table`` followed by ``t : REAL`` lines.
Missing coefficient and input sections default to zero.

Reference files for the built-in problems ship under ``docs/problems/``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError
from .problem import (
    CoefFn,
    Modulation,
    NamedProfile,
    RandomInput,
    SLQProblem,
    named_profile,
)

__all__ = ["parse_problem", "load_problem", "problem_text", "save_problem"]

_COEF_SECTIONS = {f"coef.{c.lower()}": c for c in ("A", "B", "C", "D", "Q", "S", "R")}
_INPUT_SECTIONS = {f"input.{c}": c for c in ("b", "sigma", "q", "rho")}


def _reshape(arr: np.ndarray, shape, what: str) -> np.ndarray:
    try:
        return arr.reshape(shape)
    except ValueError:
        raise InvalidInputError(
            f"{what}: value of size {arr.size} does not fit shape {shape}"
        ) from None


def _parse_matrix(text: str) -> np.ndarray:
    rows = [r for r in text.split(";") if r.strip()]
    try:
        data = [[float(x) for x in row.split(",")] for row in rows]
    except ValueError as exc:
        raise InvalidInputError(f"bad matrix literal {text!r}: {exc}") from None
    lengths = {len(r) for r in data}
    if not data or len(lengths) != 1:
        raise InvalidInputError(f"ragged matrix literal {text!r}")
    return np.asarray(data, dtype=float)


def _parse_sections(text: str) -> dict:
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections.setdefault(current, [])
            continue
        if current is None:
            raise InvalidInputError(f"line {lineno}: content before any [section]")
        sections[current].append((lineno, line))
    return sections


def _split_kv(line: str, lineno: int, keep_case: bool = False):
    if "=" not in line:
        raise InvalidInputError(f"line {lineno}: expected 'key = value', got {line!r}")
    key, val = line.split("=", 1)
    key = key.strip()
    return (key if keep_case else key.lower()), val.strip()


def _parse_coef(lines, shape, what: str) -> CoefFn:
    constant = None
    table_rows = []
    for lineno, line in lines:
        if "=" in line and ":" not in line.split("=", 1)[0]:
            key, val = _split_kv(line, lineno)
            if key != "constant":
                raise InvalidInputError(f"line {lineno}: unknown key {key!r} in {what}")
            constant = _parse_matrix(val)
        elif ":" in line:
            t_str, mat = line.split(":", 1)
            table_rows.append((float(t_str), _parse_matrix(mat)))
        else:
            raise InvalidInputError(f"line {lineno}: cannot parse {line!r} in {what}")
    if constant is not None and table_rows:
        raise InvalidInputError(f"{what}: give either a constant or a table, not both")
    if constant is not None:
        return CoefFn.const(_reshape(constant, shape, what))
    if table_rows:
        table_rows.sort(key=lambda kv: kv[0])
        grid = np.array([t for t, _ in table_rows])
        vals = np.stack([_reshape(m, shape, what) for _, m in table_rows])
        return CoefFn.from_table(grid, vals)
    return CoefFn.const(np.zeros(shape))


def _parse_input(lines, dim: int, what: str) -> RandomInput:
    det_const = None
    gamma = None
    profile_named = None
    mode = None  # which '... = table' is collecting bare lines
    det_rows: list = []
    prof_rows: list = []
    for lineno, line in lines:
        if "=" in line and ":" not in line.split("=", 1)[0]:
            key, val = _split_kv(line, lineno)
            if key == "deterministic":
                if val.lower() == "table":
                    mode = "deterministic"
                else:
                    det_const = _reshape(_parse_matrix(val), dim, what)
            elif key == "gamma":
                gamma = float(val)
            elif key == "profile":
                if val.lower() == "table":
                    mode = "profile"
                elif val.lower().startswith("named:"):
                    profile_named = named_profile(val[6:].strip())
                else:
                    raise InvalidInputError(
                        f"line {lineno}: profile must be 'named:<id>' or 'table'"
                    )
            else:
                raise InvalidInputError(f"line {lineno}: unknown key {key!r} in {what}")
        elif ":" in line:
            t_str, vec = line.split(":", 1)
            row = (float(t_str), _parse_matrix(vec))
            if mode == "deterministic":
                det_rows.append(row)
            elif mode == "profile":
                prof_rows.append(row)
            else:
                raise InvalidInputError(
                    f"line {lineno}: table row outside 'deterministic = table' or "
                    f"'profile = table' in {what}"
                )
        else:
            raise InvalidInputError(f"line {lineno}: cannot parse {line!r} in {what}")

    if det_rows:
        det_rows.sort(key=lambda kv: kv[0])
        det = CoefFn.from_table(
            np.array([t for t, _ in det_rows]),
            np.stack([_reshape(m, dim, what) for _, m in det_rows]),
        )
    else:
        det = CoefFn.const(det_const if det_const is not None else np.zeros(dim))

    modulated = None
    if gamma is not None or profile_named is not None or prof_rows:
        if gamma is None:
            raise InvalidInputError(f"{what}: modulated input needs gamma")
        if profile_named is not None:
            profile = profile_named
        elif prof_rows:
            prof_rows.sort(key=lambda kv: kv[0])
            profile = CoefFn.from_table(
                np.array([t for t, _ in prof_rows]),
                np.array([float(_reshape(m, (), what + ' profile')) for _, m in prof_rows]),
            )
        else:
            raise InvalidInputError(f"{what}: modulated input needs a profile")
        modulated = Modulation(gamma=gamma, profile=profile)
    return RandomInput(deterministic=det, modulated=modulated)


def parse_problem(text: str, name: str = "") -> SLQProblem:
    """Parse a problem definition from text; see the module docstring."""
    sections = _parse_sections(text)
    for needed in ("dims", "horizon", "terminal"):
        if needed not in sections:
            raise InvalidInputError(f"missing required section [{needed}]")

    kv = dict(_split_kv(line, no) for no, line in sections["dims"])
    try:
        n, m = int(kv["n"]), int(kv["m"])
    except KeyError as exc:
        raise InvalidInputError(f"[dims] needs n and m (missing {exc})") from None
    kv = dict(_split_kv(line, no) for no, line in sections["horizon"])
    if "t" not in kv:
        raise InvalidInputError("[horizon] needs T")
    T = float(kv["t"])

    shapes = {"A": (n, n), "B": (n, m), "C": (n, n), "D": (n, m),
              "Q": (n, n), "S": (m, n), "R": (m, m)}
    coefs = {}
    for sec, cname in _COEF_SECTIONS.items():
        lines = sections.get(sec, [])
        coefs[cname] = _parse_coef(lines, shapes[cname], f"[{sec}]")

    # G and g are distinguished by case in [terminal]
    kv = dict(_split_kv(line, no, keep_case=True) for no, line in sections["terminal"])
    if "G" not in kv:
        raise InvalidInputError("[terminal] needs G")
    G = _reshape(_parse_matrix(kv["G"]), (n, n), "[terminal] G")
    g_vec = _reshape(_parse_matrix(kv["g"]), n, "[terminal] g") if "g" in kv else np.zeros(n)

    dims = {"b": n, "sigma": n, "q": n, "rho": m}
    inputs = {}
    for sec, iname in _INPUT_SECTIONS.items():
        lines = sections.get(sec, [])
        inputs[iname] = _parse_input(lines, dims[iname], f"[{sec}]")

    return SLQProblem(
        n=n, m=m, T=T,
        A=coefs["A"], B=coefs["B"], C=coefs["C"], D=coefs["D"],
        Q=coefs["Q"], S=coefs["S"], R=coefs["R"],
        G=G, g=g_vec,
        b=inputs["b"], sigma=inputs["sigma"], q=inputs["q"], rho=inputs["rho"],
        name=name,
    )


def load_problem(path) -> SLQProblem:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_problem(fh.read(), name=str(path))


def _fmt_matrix(M: np.ndarray) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return "; ".join(", ".join(f"{v:.17g}" for v in row) for row in M)


def _coef_lines(c: CoefFn) -> list:
    if c.kind == "constant":
        return [f"constant = {_fmt_matrix(c.constant)}"]
    return [f"{t:.17g} : {_fmt_matrix(v)}" for t, v in zip(c.table.grid, c.table.values)]


def _input_lines(inp: RandomInput) -> list:
    out = []
    det = inp.deterministic
    if det.kind == "constant":
        out.append(f"deterministic = {_fmt_matrix(det.constant)}")
    else:
        out.append("deterministic = table")
        out += [f"{t:.17g} : {_fmt_matrix(v)}" for t, v in zip(det.table.grid, det.table.values)]
    if inp.modulated is not None:
        out.append(f"gamma = {inp.modulated.gamma:.17g}")
        prof = inp.modulated.profile
        if isinstance(prof, NamedProfile):
            out.append(f"profile = named:{prof.name}")
        else:
            out.append("profile = table")
            out += [f"{t:.17g} : {_fmt_matrix(v)}" for t, v in zip(prof.table.grid, prof.table.values)]
    return out


def problem_text(p: SLQProblem) -> str:
    """Serialize a problem in the definition-file format (17 digits)."""
    lines = ["[dims]", f"n = {p.n}", f"m = {p.m}", "", "[horizon]", f"T = {p.T:.17g}", ""]
    for cname in ("A", "B", "C", "D", "Q", "S", "R"):
        lines.append(f"[coef.{cname}]")
        lines += _coef_lines(getattr(p, cname))
        lines.append("")
    lines.append("[terminal]")
    lines.append(f"G = {_fmt_matrix(p.G)}")
    if np.any(p.g != 0.0):
        lines.append(f"g = {_fmt_matrix(p.g.reshape(1, -1))}")
    lines.append("")
    for iname in ("b", "sigma", "q", "rho"):
        inp = getattr(p, iname)
        if inp.is_zero():
            continue
        lines.append(f"[input.{iname}]")
        lines += _input_lines(inp)
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def save_problem(p: SLQProblem, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(problem_text(p))
