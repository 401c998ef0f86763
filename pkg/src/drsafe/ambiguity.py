"""Moment-based ambiguity sets and nominal disturbance distributions.

An ambiguity set collects every probability distribution on a compact box
support whose mean lies within a componentwise tolerance of an estimate and
whose centered second moment is dominated (in the PSD order) by a scaled
estimate.  Feasibility (non-emptiness) is certified constructively on a
fixed atom grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, stats

from .atoms import dyadic_grid, midpoint_grid, moment_rows, snap_atom_count
from .errors import ConfigurationError, InfeasibleAmbiguityError, SolverError

_LP_OPTS = {"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9}

FEASIBILITY_ATOMS = 64  # snapped to 65 so the grid is dyadic with endpoints


def _frozen(a, shape=None) -> np.ndarray:
    out = np.atleast_1d(np.asarray(a, dtype=float))
    if shape is not None:
        out = out.reshape(shape)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    atoms_per_dim: int
    witness_points: Optional[np.ndarray] = None
    witness_weights: Optional[np.ndarray] = None


@dataclass(frozen=True)
class MomentAmbiguitySet:
    """Distributions on [support_lo, support_hi] with constrained moments.

    mean_tol (b >= 0) bounds |E[w] - mean| componentwise; the centered second
    moment must satisfy E[(w-mean)(w-mean)'] <= scale * second_moment with
    scale >= 1.  second_moment is symmetrized and must be PSD up to -1e-10 on
    its spectrum (small negative eigenvalues are clamped to zero).

    Construction verifies non-emptiness on a 65-point-per-dimension dyadic
    atom grid unless ``check=False``; an infeasible verdict at that
    resolution is conservative (retry finer via :func:`check_feasible`).
    """

    support_lo: np.ndarray
    support_hi: np.ndarray
    mean: np.ndarray
    mean_tol: np.ndarray
    second_moment: np.ndarray
    scale: float = 1.0
    check: bool = True

    def __post_init__(self):
        lo = _frozen(self.support_lo)
        hi = _frozen(self.support_hi)
        l = lo.shape[0]
        if hi.shape != (l,) or np.any(hi < lo):
            raise ConfigurationError("ambiguity support must satisfy lo <= hi, equal lengths")
        mean = _frozen(self.mean, (l,))
        tol = _frozen(self.mean_tol, (l,)) if np.ndim(self.mean_tol) else _frozen(
            np.full(l, float(self.mean_tol)))
        if np.any(tol < 0):
            raise ConfigurationError("mean_tol must be >= 0")
        if self.scale < 1.0:
            raise ConfigurationError("scale must be >= 1")
        sig = np.atleast_2d(np.asarray(self.second_moment, dtype=float))
        if sig.shape != (l, l):
            raise ConfigurationError("second_moment must be an l x l matrix")
        sig = 0.5 * (sig + sig.T)
        eigval, eigvec = np.linalg.eigh(sig)
        if np.min(eigval) < -1e-10:
            raise ConfigurationError(
                f"second_moment has eigenvalue {np.min(eigval):.3e} < -1e-10; not PSD")
        sig = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
        sig = 0.5 * (sig + sig.T)
        object.__setattr__(self, "support_lo", lo)
        object.__setattr__(self, "support_hi", hi)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "mean_tol", tol)
        object.__setattr__(self, "second_moment", _frozen(sig, (l, l)))
        object.__setattr__(self, "scale", float(self.scale))
        if self.check:
            res = check_feasible(self)
            if not res.feasible:
                raise InfeasibleAmbiguityError(
                    f"no distribution on a {res.atoms_per_dim}-atom-per-dimension grid "
                    "satisfies the moment constraints (set check=False to defer, or "
                    "retry check_feasible with a finer grid)")

    @property
    def dim(self) -> int:
        return self.support_lo.shape[0]

    def with_params(self, mean_tol=None, scale=None) -> "MomentAmbiguitySet":
        """Copy with a different mean tolerance and/or scale."""
        return MomentAmbiguitySet(
            support_lo=self.support_lo, support_hi=self.support_hi, mean=self.mean,
            mean_tol=self.mean_tol if mean_tol is None else mean_tol,
            second_moment=self.second_moment,
            scale=self.scale if scale is None else scale,
            check=self.check)


def check_feasible(amb: MomentAmbiguitySet,
                   atoms_per_dim: int = FEASIBILITY_ATOMS) -> FeasibilityResult:
    """Search an atom grid for a distribution in the set.

    A feasible verdict returns the witness atoms and weights.  An infeasible
    verdict only certifies infeasibility at this resolution.  LP failures
    other than infeasibility raise :class:`SolverError`.
    """
    points = dyadic_grid(amb.support_lo, amb.support_hi, atoms_per_dim)
    n = points.shape[0]
    a_ub, b_ub = moment_rows(points, amb.mean, amb.mean_tol, amb.second_moment, amb.scale)
    res = optimize.linprog(
        c=np.zeros(n), A_ub=a_ub, b_ub=b_ub,
        A_eq=np.ones((1, n)), b_eq=np.ones(1),
        bounds=(0.0, None), method="highs", options=_LP_OPTS)
    snapped = snap_atom_count(atoms_per_dim)
    if res.status == 0:
        w = np.asarray(res.x)
        keep = w > 1e-12
        return FeasibilityResult(True, snapped, points[keep], w[keep])
    if res.status == 2:
        return FeasibilityResult(False, snapped)
    raise SolverError(f"feasibility LP failed with status {res.status}: {res.message}")


@dataclass(frozen=True)
class NominalDistribution:
    """A single estimated disturbance distribution on a box support.

    kinds:
      * ``uniform`` — uniform on [lo, hi].
      * ``truncated-normal`` — componentwise independent normal(mean, std)
        conditioned on [lo, hi]; ``std`` is the pre-truncation parameter.
      * ``atoms`` — a finite list of points with weights summing to one.
    """

    kind: str
    lo: np.ndarray
    hi: np.ndarray
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        lo = _frozen(self.lo)
        hi = _frozen(self.hi)
        l = lo.shape[0]
        if hi.shape != (l,) or np.any(hi < lo):
            raise ConfigurationError("nominal support must satisfy lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.kind == "uniform":
            pass
        elif self.kind == "truncated-normal":
            if self.mean is None or self.std is None:
                raise ConfigurationError("truncated-normal requires mean and std")
            mean = _frozen(self.mean, (l,)) if np.ndim(self.mean) else _frozen(
                np.full(l, float(self.mean)))
            std = _frozen(self.std, (l,)) if np.ndim(self.std) else _frozen(
                np.full(l, float(self.std)))
            if np.any(std <= 0):
                raise ConfigurationError("truncated-normal std must be > 0")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "std", std)
        elif self.kind == "atoms":
            if self.points is None or self.weights is None:
                raise ConfigurationError("atoms kind requires points and weights")
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.shape[1] != l:
                pts = pts.reshape(-1, l)
            w = np.asarray(self.weights, dtype=float).reshape(pts.shape[0])
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigurationError("atom weights must be >= 0 and sum to 1 (1e-12)")
            if np.any(pts < lo) or np.any(pts > hi):
                raise ConfigurationError("atoms must lie inside the support box")
            pts.flags.writeable = False
            w.flags.writeable = False
            object.__setattr__(self, "points", pts)
            object.__setattr__(self, "weights", w)
        else:
            raise ConfigurationError(f"unknown nominal kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def _cell_weights_1d(self, d: int, edges: np.ndarray) -> np.ndarray:
        if self.kind == "uniform":
            w = np.diff(edges)
        else:  # truncated-normal
            z = (edges - self.mean[d]) / self.std[d]
            w = np.diff(stats.norm.cdf(z))
        total = w.sum()
        if total <= 0:
            raise ConfigurationError("nominal distribution has zero mass on its support")
        return w / total

    def sample_sequence(self, gen: np.random.Generator, horizon: int) -> np.ndarray:
        """Draw ``horizon`` disturbances, shape (horizon, l), by inverse CDF.

        uniform / truncated-normal consume exactly horizon * l uniforms;
        atoms consume horizon uniforms.  Given the same generator state the
        draw is bitwise reproducible.
        """
        l = self.dim
        if self.kind == "atoms":
            u = gen.random(horizon)
            cum = np.cumsum(self.weights)
            cum[-1] = 1.0
            idx = np.searchsorted(cum, u, side="right")
            idx = np.minimum(idx, self.points.shape[0] - 1)
            return self.points[idx]
        u = gen.random((horizon, l))
        if self.kind == "uniform":
            return self.lo + u * (self.hi - self.lo)
        out = np.empty((horizon, l))
        for d in range(l):
            a = stats.norm.cdf((self.lo[d] - self.mean[d]) / self.std[d])
            b = stats.norm.cdf((self.hi[d] - self.mean[d]) / self.std[d])
            out[:, d] = self.mean[d] + self.std[d] * stats.norm.ppf(a + u[:, d] * (b - a))
        np.clip(out, self.lo, self.hi, out=out)
        return out


def singleton(nominal: NominalDistribution, atoms_per_dim: int = 256):
    """Atomize a nominal distribution by the midpoint rule.

    Returns (points, weights): cell midpoints on a uniform partition of the
    support with weights equal to the per-cell probability mass,
    renormalized.  ``atoms`` distributions pass through unchanged.
    """
    if nominal.kind == "atoms":
        return nominal.points, nominal.weights
    points, edges = midpoint_grid(nominal.lo, nominal.hi, atoms_per_dim)
    per_dim = [nominal._cell_weights_1d(d, edges[d]) for d in range(nominal.dim)]
    if nominal.dim == 1:
        weights = per_dim[0]
    else:
        mesh = np.meshgrid(*per_dim, indexing="ij")
        weights = np.ones_like(mesh[0])
        for m in mesh:
            weights = weights * m
        weights = weights.ravel()
    weights = weights / weights.sum()
    return points, weights
