"""Dense linear algebra and grid-function utilities shared by all solvers.

Matrices are plain float64 ``numpy`` arrays.  Symmetric matrices are ordinary
square arrays kept symmetric by construction (see :func:`symmetrize`); there
is no separate packed storage.  Time-dependent quantities are :class:`GridFn`
values: node samples on a strictly increasing grid, linearly interpolated in
between and clamped outside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "pinv",
    "range_included",
    "symmetrize",
    "is_symmetric",
    "GridFn",
    "l2_norm",
]


def _as_matrix(M, name: str = "matrix") -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    elif A.ndim == 1:
        A = A.reshape(-1, 1)
    if A.ndim != 2:
        raise InvalidInputError(f"{name} must be at most 2-dimensional, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return A


def pinv(M, rel_tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with a relative rank cutoff.

    Singular values at or below ``rel_tol * max(singular values)`` are
    treated as zero.  A zero matrix therefore maps to the zero matrix,
    reproducing the 0^+ = 0 convention required by degenerate scalar
    problems.

    Parameters
    ----------
    M : array_like
        Matrix to invert; must be finite.
    rel_tol : float
        Relative singular-value cutoff, in (0, 1).
    """
    if not (0.0 < rel_tol < 1.0):
        raise InvalidInputError(f"rel_tol must be in (0, 1), got {rel_tol}")
    A = _as_matrix(M, "pinv input")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((A.shape[1], A.shape[0]))
    keep = s > rel_tol * s[0]
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (Vt.T * s_inv) @ U.T


def range_included(N, M, tol: float) -> bool:
    """Numerical test for range(N) being contained in range(M).

    Returns True iff ``||(I - M M^+) N||_F <= tol * max(1, ||N||_F)``.
    Both matrices must have the same number of rows.
    """
    if tol <= 0.0:
        raise InvalidInputError(f"tol must be positive, got {tol}")
    A = _as_matrix(N, "N")
    B = _as_matrix(M, "M")
    if A.shape[0] != B.shape[0]:
        raise InvalidInputError(f"row counts differ: N has {A.shape[0]}, M has {B.shape[0]}")
    proj = np.eye(B.shape[0]) - B @ pinv(B)
    resid = np.linalg.norm(proj @ A)
    return bool(resid <= tol * max(1.0, np.linalg.norm(A)))


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Return (M + M') / 2."""
    return 0.5 * (M + M.T)


def is_symmetric(M, tol: float = 0.0) -> bool:
    A = np.asarray(M, dtype=float)
    return A.ndim == 2 and A.shape[0] == A.shape[1] and bool(np.all(np.abs(A - A.T) <= tol))


@dataclass(frozen=True)
class GridFn:
    """A time-dependent array sampled on a strictly increasing grid.

    ``values[k]`` is the sample at ``grid[k]``; entries may be scalars,
    vectors or matrices as long as every node shares one shape.  Evaluation
    interpolates linearly between nodes and clamps outside the grid span.
    Instances are immutable and safe to share across threads.
    """

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.size == 0:
            raise InvalidInputError("grid must be a non-empty 1-D array")
        if g.size > 1 and not np.all(np.diff(g) > 0.0):
            raise InvalidInputError("grid must be strictly increasing")
        if v.shape[0] != g.size:
            raise InvalidInputError(
                f"values leading dimension {v.shape[0]} does not match grid size {g.size}"
            )
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(v)):
            raise InvalidInputError("grid function has non-finite entries")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @property
    def value_shape(self) -> tuple:
        return self.values.shape[1:]

    def __call__(self, s):
        """Evaluate at scalar or array times (linear interpolation, clamped)."""
        s_arr = np.asarray(s, dtype=float)
        scalar = s_arr.ndim == 0
        pts = np.atleast_1d(s_arr)
        g = self.grid
        if g.size == 1:
            out = np.broadcast_to(self.values[0], (pts.size,) + self.value_shape).copy()
        else:
            idx = np.clip(np.searchsorted(g, pts, side="right") - 1, 0, g.size - 2)
            h = g[idx + 1] - g[idx]
            w = np.clip((pts - g[idx]) / h, 0.0, 1.0)
            w = w.reshape((-1,) + (1,) * len(self.value_shape))
            out = (1.0 - w) * self.values[idx] + w * self.values[idx + 1]
        return out[0] if scalar else out

    def restrict(self, t_max: float) -> "GridFn":
        """Nodes with grid <= t_max (no resampling; restriction is exact)."""
        keep = self.grid <= t_max + 1e-15
        if not np.any(keep):
            raise InvalidInputError(f"no grid nodes at or below {t_max}")
        return GridFn(self.grid[keep], self.values[keep])


def l2_norm(f: GridFn) -> float:
    """Trapezoid approximation of the L2 norm sqrt(int |f(s)|_F^2 ds).

    The integrand is the squared Frobenius norm at each node, integrated over
    the grid span.  Requires at least two nodes.
    """
    if f.grid.size < 2:
        raise InvalidInputError("l2_norm requires a grid with at least 2 points")
    sq = np.sum(f.values.reshape(f.grid.size, -1) ** 2, axis=1)
    return float(np.sqrt(np.trapezoid(sq, f.grid)))
