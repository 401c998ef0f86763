"""Dyadic atom grids and the linear moment constraints used on them.

Shared by the ambiguity feasibility check and the atomized-primal oracle so
both sides discretize disturbances identically.
"""

from __future__ import annotations

import itertools

import numpy as np


def snap_atom_count(n: int) -> int:
    """Round an atom count up to the next 2**k + 1.

    Uniform grids with endpoints only nest when the interval count doubles,
    so resolutions are restricted to 2**k + 1 points per dimension (a
    requested 64 becomes 65, 4096 becomes 4097, ...).  This makes refinement
    monotonicity an exact property rather than an approximate one.
    """
    if n < 2:
        raise ValueError("atom count must be >= 2")
    k = int(np.ceil(np.log2(n - 1)))
    return 2 ** k + 1


def dyadic_grid(lo: np.ndarray, hi: np.ndarray, atoms_per_dim: int) -> np.ndarray:
    """Cartesian grid of shape (atoms**l, l) with endpoints included.

    ``atoms_per_dim`` is snapped up via :func:`snap_atom_count`; grids at
    snapped counts n and 2(n-1)+1 share the coarse points bitwise.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    n = snap_atom_count(atoms_per_dim)
    axes = [np.linspace(lo[d], hi[d], n) for d in range(lo.shape[0])]
    if lo.shape[0] == 1:
        return axes[0][:, None]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def midpoint_grid(lo: np.ndarray, hi: np.ndarray, cells_per_dim: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Cell midpoints (cells**l, l) plus the per-dimension cell edges."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if cells_per_dim < 1:
        raise ValueError("cell count must be >= 1")
    edges = [np.linspace(lo[d], hi[d], cells_per_dim + 1) for d in range(lo.shape[0])]
    mids = [0.5 * (e[:-1] + e[1:]) for e in edges]
    if lo.shape[0] == 1:
        return mids[0][:, None], edges
    mesh = np.meshgrid(*mids, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), edges


def moment_rows(points: np.ndarray, mean: np.ndarray, mean_tol: np.ndarray,
                second_moment: np.ndarray, scale: float):
    """Inequality rows A_ub p <= b_ub encoding the moment constraints on atoms.

    Mean rows are exact.  The second-moment ordering E[(w-m)(w-m)'] <= c*Sigma
    is exact for l = 1; for l > 1 it is relaxed to linear consequences of
    positive semidefiniteness: nonnegative diagonal of the slack matrix and
    |offdiag slack| bounded by the average of the corresponding diagonal
    slacks (implied by the 2x2 principal minors).
    """
    points = np.asarray(points, dtype=float)
    n_atoms, l = points.shape
    mean = np.asarray(mean, dtype=float).reshape(l)
    mean_tol = np.asarray(mean_tol, dtype=float).reshape(l)
    sigma = np.atleast_2d(np.asarray(second_moment, dtype=float))
    centered = points - mean

    rows = []
    rhs = []
    for d in range(l):
        rows.append(points[:, d])
        rhs.append(mean[d] + mean_tol[d])
        rows.append(-points[:, d])
        rhs.append(-(mean[d] - mean_tol[d]))
    for d in range(l):
        rows.append(centered[:, d] ** 2)
        rhs.append(scale * sigma[d, d])
    for i, j in itertools.combinations(range(l), 2):
        q = centered[:, i] * centered[:, j]
        s = 0.5 * (centered[:, i] ** 2 + centered[:, j] ** 2)
        avg = 0.5 * (sigma[i, i] + sigma[j, j])
        # (c Sigma - M)_ij <= ((c Sigma - M)_ii + (c Sigma - M)_jj) / 2, both signs
        rows.append(s - q)
        rhs.append(scale * (avg - sigma[i, j]))
        rows.append(s + q)
        rhs.append(scale * (avg + sigma[i, j]))
    return np.array(rows), np.array(rhs)
