"""Brute-force atomized lower-level problems.

The worst-case expectation over a moment ambiguity set is bounded from above
by restricting to distributions supported on a finite atom grid and solving
the resulting LP.  Refining the (nested, dyadic) grid tightens the bound
monotonically; this is the reference the dual solver is checked against.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import optimize

from .ambiguity import MomentAmbiguitySet, NominalDistribution, singleton
from .atoms import dyadic_grid, moment_rows
from .errors import AtomGridInfeasibleError, SolverError

_LP_OPTS = {"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9}

Payoff = Callable[[np.ndarray], np.ndarray]  # (N, l) -> (N,)


def primal_value(amb: MomentAmbiguitySet, payoff: Payoff,
                 atoms_per_dim: int = 4096) -> tuple[float, np.ndarray]:
    """min_p sum_i p_i payoff(w_i) over atomized members of the ambiguity set.

    Atoms form a dyadic grid with endpoints (count snapped up to 2**k + 1),
    so doubling the resolution only adds atoms and the value can only
    decrease.  The result converges to the exact worst case from above.
    Exact moment encoding for l = 1; documented linear relaxation of the PSD
    ordering for l > 1 (see atoms.moment_rows).  Returns the value and the
    optimal atom weights (aligned with the dyadic grid order).
    """
    points = dyadic_grid(amb.support_lo, amb.support_hi, atoms_per_dim)
    g = np.asarray(payoff(points), dtype=float).reshape(points.shape[0])
    a_ub, b_ub = moment_rows(points, amb.mean, amb.mean_tol,
                             amb.second_moment, amb.scale)
    res = optimize.linprog(
        c=g, A_ub=a_ub, b_ub=b_ub,
        A_eq=np.ones((1, points.shape[0])), b_eq=np.ones(1),
        bounds=(0.0, None), method="highs", options=_LP_OPTS)
    if res.status == 0:
        return float(res.fun), np.asarray(res.x)
    if res.status == 2:
        raise AtomGridInfeasibleError(
            f"moment LP infeasible at {points.shape[0]} atoms "
            f"({amb.dim} dim); retry with a finer atom grid")
    raise SolverError(f"atomized primal LP status {res.status}: {res.message}")


def nominal_expectation(nominal: NominalDistribution, payoff: Payoff,
                        atoms_per_dim: int = 256) -> float:
    """Quadrature E[payoff(w)] under a nominal distribution (midpoint rule)."""
    points, weights = singleton(nominal, atoms_per_dim)
    g = np.asarray(payoff(points), dtype=float).reshape(points.shape[0])
    return float(np.dot(weights, g))
