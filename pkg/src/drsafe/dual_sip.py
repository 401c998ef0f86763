"""Dual solver for the worst-case expectation over a moment ambiguity set.

The inner problem  inf_{mu in D} E_mu[g(w)]  is solved through its conic
dual: maximize  -b_lo'lam_lo - b_hi'lam_hi - c tr(Sigma Lam) - nu  over
multipliers lam_lo, lam_hi >= 0 (mean interval), Lam >= 0 (second moment),
nu free (mass), subject to the semi-infinite constraint

    w'(lam_hi - lam_lo) + (w-m)' Lam (w-m) + nu + g(w) >= 0   for all w in W,

with b_lo = b - m and b_hi = b + m.  The constraint index set is handled by
an exchange method: solve the LP relaxation on a finite set of points, add
the most violated point, repeat.  Lam is kept diagonal (exact for l = 1,
a conservative lower bound for l > 1).

For affine scalar dynamics and a piecewise-linear stage value function the
constraint function is piecewise quadratic in w, and the most violated point
is found exactly segment by segment; otherwise a dense scan with
golden-section refinement is used.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .ambiguity import MomentAmbiguitySet, FEASIBILITY_ATOMS
from .atoms import dyadic_grid
from .errors import ConfigurationError, SolverError

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the exchange solver and the Bellman backup around it."""

    feas_tol: float = 1e-7          # exchange termination: min residual >= -feas_tol
    max_iterations: int = 100       # exchange iteration cap
    scan_points: int = 2049         # dense scan resolution per dimension (non-exact path)
    prune_slack: float = 1e-3       # drop active constraints slacker than this
    verify_factor: int = 4          # verification grid refinement over scan grid
    lp_tol: float = 1e-9            # LP subsolver feasibility/optimality tolerance
    nominal_atoms: int = 256        # quadrature cells for nominal expectations
    threads: int = 1                # worker threads for grid backups

    def lp_options(self) -> dict:
        tol = max(min(self.lp_tol, self.feas_tol / 10.0), 1e-11)
        return {"primal_feasibility_tolerance": tol,
                "dual_feasibility_tolerance": tol}


@dataclass(frozen=True)
class DualMultipliers:
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    lam_cov: np.ndarray  # diagonal of Lam
    nu: float
    objective: float


@dataclass(frozen=True)
class DualCertificate:
    """Multipliers, active points, and diagnostics of one dual solve.

    ``value`` is the dual objective clamped to [0, 1]; ``raw_value`` is the
    unclamped objective.  ``residual`` is the most negative constraint value
    found at termination (>= -feas_tol when ``converged``).
    """

    lam_lo: np.ndarray
    lam_hi: np.ndarray
    lam_cov: np.ndarray
    nu: float
    value: float
    raw_value: float
    active_points: np.ndarray
    residual: float
    iterations: int
    converged: bool
    objective_history: tuple = field(default=())

    def multipliers(self) -> DualMultipliers:
        return DualMultipliers(self.lam_lo, self.lam_hi, self.lam_cov,
                               self.nu, self.raw_value)


class PiecewisePayoff1D:
    """Piecewise-linear payoff on an interval, as closed segments.

    Segments may disagree at shared endpoints, which represents one-sided
    limits at jump discontinuities (the constraint must hold against the
    lower envelope, which a closed-segment minimization delivers).
    ``evaluate`` is the pointwise payoff used for integrals/quadrature.
    """

    exact = True

    def __init__(self, seg_lo, seg_hi, val_lo, val_hi, evaluate_fn, w_lo, w_hi):
        self.seg_lo = np.asarray(seg_lo, dtype=float)
        self.seg_hi = np.asarray(seg_hi, dtype=float)
        self.val_lo = np.asarray(val_lo, dtype=float)
        self.val_hi = np.asarray(val_hi, dtype=float)
        self._evaluate = evaluate_fn
        self.support_lo = np.array([float(w_lo)])
        self.support_hi = np.array([float(w_hi)])

    @classmethod
    def from_breakpoints(cls, breakpoints, values) -> "PiecewisePayoff1D":
        """Continuous piecewise-linear payoff through (breakpoints, values)."""
        bp = np.asarray(breakpoints, dtype=float)
        vv = np.asarray(values, dtype=float)
        if bp.ndim != 1 or bp.shape != vv.shape or bp.shape[0] < 2:
            raise ConfigurationError("need >= 2 breakpoints with matching values")
        if np.any(np.diff(bp) <= 0):
            raise ConfigurationError("breakpoints must be strictly increasing")

        def ev(w):
            return np.interp(np.asarray(w, dtype=float).ravel(), bp, vv)

        return cls(bp[:-1], bp[1:], vv[:-1], vv[1:], ev, bp[0], bp[-1])

    def evaluate(self, w_batch: np.ndarray) -> np.ndarray:
        return np.asarray(self._evaluate(w_batch), dtype=float).reshape(-1)


class ScanPayoff:
    """Black-box payoff over a box support; searched by dense scan."""

    exact = False

    def __init__(self, evaluate_fn, support_lo, support_hi):
        self._evaluate = evaluate_fn
        self.support_lo = np.atleast_1d(np.asarray(support_lo, dtype=float))
        self.support_hi = np.atleast_1d(np.asarray(support_hi, dtype=float))

    def evaluate(self, w_batch: np.ndarray) -> np.ndarray:
        return np.asarray(self._evaluate(w_batch), dtype=float).reshape(-1)


def payoff_from_value_function(v_next, dynamics, x, u, support_lo, support_hi):
    """Build w -> v_next(f(x, u, w)) restricted to the support box.

    Takes the exact piecewise-linear route for scalar affine dynamics with a
    scalar disturbance; anything else falls back to a scan payoff.  Regions
    of w whose image leaves the safe region contribute value 0 on closed
    segments (the lower envelope at the jump across the region boundary).
    """
    x = np.asarray(x, dtype=float).reshape(dynamics.state_dim)
    u = np.asarray(u, dtype=float).reshape(dynamics.control_dim)
    lo = np.atleast_1d(np.asarray(support_lo, dtype=float))
    hi = np.atleast_1d(np.asarray(support_hi, dtype=float))

    def ev(w_batch):
        return v_next.evaluate(dynamics.step_w_batch(x, u, w_batch))

    if not (dynamics.disturbance_dim == 1 and dynamics.state_dim == 1
            and dynamics.affine is not None):
        return ScanPayoff(ev, lo, hi)

    aff = dynamics.affine
    base = float(aff.a_x[0, 0] * x[0] + aff.b_u[0] @ u + aff.c[0])
    gain = float(aff.g_w[0, 0])
    w_lo, w_hi = float(lo[0]), float(hi[0])
    a_lo = float(v_next.region.lo[0])
    a_hi = float(v_next.region.hi[0])
    xs, vs = v_next.inside_nodes_1d()

    if gain == 0.0 or w_lo == w_hi:
        g = float(ev(np.array([[w_lo]]))[0])
        return PiecewisePayoff1D([w_lo], [w_hi], [g], [g], ev, w_lo, w_hi)

    knots_w = (xs - base) / gain
    inner = knots_w[(knots_w > w_lo) & (knots_w < w_hi)]
    ws = np.unique(np.concatenate([[w_lo, w_hi], inner]))
    seg_lo, seg_hi = ws[:-1], ws[1:]
    mid_x = base + gain * 0.5 * (seg_lo + seg_hi)
    inside = (mid_x >= a_lo) & (mid_x <= a_hi)
    val_lo = np.where(inside, np.interp(base + gain * seg_lo, xs, vs), 0.0)
    val_hi = np.where(inside, np.interp(base + gain * seg_hi, xs, vs), 0.0)
    return PiecewisePayoff1D(seg_lo, seg_hi, val_lo, val_hi, ev, w_lo, w_hi)


class _UnboundedSubproblem(Exception):
    pass


def solve_subproblem(points: np.ndarray, payoffs: np.ndarray,
                     amb: MomentAmbiguitySet,
                     opts: Optional[SolverOptions] = None) -> DualMultipliers:
    """LP relaxation of the dual with constraints only at ``points``.

    Raises SolverError when the relaxation is unbounded (callers reseed the
    point set once before treating this as fatal) or the LP solver fails.
    """
    opts = opts or SolverOptions()
    pts = np.asarray(points, dtype=float).reshape(-1, amb.dim)
    g = np.asarray(payoffs, dtype=float).reshape(pts.shape[0])
    l = amb.dim
    b_lo = amb.mean_tol - amb.mean
    b_hi = amb.mean_tol + amb.mean
    c_lp = np.concatenate([b_lo, b_hi, amb.scale * np.diag(amb.second_moment), [1.0]])
    sq = (pts - amb.mean) ** 2
    a_ub = np.concatenate([pts, -pts, -sq, -np.ones((pts.shape[0], 1))], axis=1)
    bounds = [(0.0, None)] * (3 * l) + [(None, None)]
    res = optimize.linprog(c=c_lp, A_ub=a_ub, b_ub=g, bounds=bounds,
                           method="highs", options=opts.lp_options())
    if res.status == 3:
        raise _UnboundedSubproblem()
    if res.status != 0:
        raise SolverError(f"dual subproblem LP status {res.status}: {res.message}")
    z = np.asarray(res.x)
    return DualMultipliers(lam_lo=z[:l], lam_hi=z[l:2 * l], lam_cov=z[2 * l:3 * l],
                           nu=float(z[3 * l]), objective=float(-res.fun))


def _constraint_quad(mult: DualMultipliers, amb: MomentAmbiguitySet,
                     w_batch: np.ndarray) -> np.ndarray:
    """w'(lam_hi-lam_lo) + (w-m)'Lam(w-m) + nu for a batch of points."""
    w = np.asarray(w_batch, dtype=float).reshape(-1, amb.dim)
    delta = mult.lam_hi - mult.lam_lo
    return w @ delta + ((w - amb.mean) ** 2) @ mult.lam_cov + mult.nu


def _golden_refine(fn: Callable[[float], float], a: float, b: float,
                   iters: int = 60) -> tuple[float, float]:
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(iters):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = fn(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def most_violated_point(mult: DualMultipliers, payoff, amb: MomentAmbiguitySet,
                        opts: Optional[SolverOptions] = None):
    """Minimize the constraint function over the support.

    Returns (w_star, residual, payoff_at_w_star).  Exact for piecewise
    payoffs (per-segment quadratic minimization); otherwise a dense scan of
    ``opts.scan_points`` per dimension (l <= 2) with golden-section
    refinement around the best cell.
    """
    opts = opts or SolverOptions()
    if getattr(payoff, "exact", False):
        m = float(amb.mean[0])
        lam = float(mult.lam_cov[0])
        d = float(mult.lam_hi[0] - mult.lam_lo[0])
        wa, wb = payoff.seg_lo, payoff.seg_hi
        ga, gb = payoff.val_lo, payoff.val_hi
        length = wb - wa
        s = np.divide(gb - ga, length, out=np.zeros_like(length),
                      where=length > 0)

        def total(w, k):  # constraint value on segment k at point w
            return (lam * (w - m) ** 2 + d * w + mult.nu
                    + ga[k] + s[k] * (w - wa[k]))

        if lam > 0.0:
            vertex = m - (d + s) / (2.0 * lam)
        else:
            vertex = np.where(d + s >= 0.0, wa, wb)
        vertex = np.clip(vertex, wa, wb)
        cand = np.stack([wa, wb, vertex])  # (3, K)
        vals = (lam * (cand - m) ** 2 + d * cand + mult.nu
                + ga[None, :] + s[None, :] * (cand - wa[None, :]))
        flat = int(np.argmin(vals))
        ci, k = np.unravel_index(flat, vals.shape)
        w_star = float(cand[ci, k])
        residual = float(vals[ci, k])
        payoff_at = float(ga[k] + s[k] * (w_star - wa[k]))
        return np.array([w_star]), residual, payoff_at

    l = amb.dim
    if l > 2:
        raise ConfigurationError(
            "scan search for the most violated point supports l <= 2; "
            "provide affine scalar dynamics for the exact route")
    axes = [np.linspace(payoff.support_lo[d], payoff.support_hi[d], opts.scan_points)
            for d in range(l)]
    if l == 1:
        pts = axes[0][:, None]
    else:
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([mm.ravel() for mm in mesh], axis=1)
    gvals = payoff.evaluate(pts)
    tot = _constraint_quad(mult, amb, pts) + gvals
    best = int(np.argmin(tot))
    w_star = pts[best].copy()
    if l == 1:
        i = best
        a = axes[0][max(i - 1, 0)]
        b = axes[0][min(i + 1, opts.scan_points - 1)]

        def f(w):
            p = np.array([[w]])
            return float(_constraint_quad(mult, amb, p)[0] + payoff.evaluate(p)[0])

        w_ref, f_ref = _golden_refine(f, a, b)
        if f_ref < tot[best]:
            w_star = np.array([w_ref])
    else:
        ij = np.unravel_index(best, (opts.scan_points, opts.scan_points))
        w_star = np.array([axes[0][ij[0]], axes[1][ij[1]]])
        for _ in range(2):
            for d in range(2):
                i = int(np.searchsorted(axes[d], w_star[d]))
                a = axes[d][max(i - 1, 0)]
                b = axes[d][min(i + 1, opts.scan_points - 1)]

                def f(w, d=d):
                    p = w_star.copy()
                    p[d] = w
                    p = p[None, :]
                    return float(_constraint_quad(mult, amb, p)[0]
                                 + payoff.evaluate(p)[0])

                w_ref, _ = _golden_refine(f, a, b, iters=40)
                w_star[d] = w_ref
    p = w_star[None, :]
    payoff_at = float(payoff.evaluate(p)[0])
    residual = float(_constraint_quad(mult, amb, p)[0] + payoff_at)
    return w_star, residual, payoff_at


def _violating_segment_points(mult: DualMultipliers, payoff,
                              amb: MomentAmbiguitySet, tol: float,
                              cap: int = 64):
    """Per-segment constraint minimizers with residual < -tol, worst first.

    Exact payoffs only.  Coincident endpoints of adjacent segments keep the
    smaller payoff (the lower envelope at a jump).
    """
    m = float(amb.mean[0])
    lam = float(mult.lam_cov[0])
    d = float(mult.lam_hi[0] - mult.lam_lo[0])
    wa, wb = payoff.seg_lo, payoff.seg_hi
    ga = payoff.val_lo
    length = wb - wa
    s = np.divide(payoff.val_hi - ga, length, out=np.zeros_like(length),
                  where=length > 0)
    if lam > 0.0:
        best_w = np.clip(m - (d + s) / (2.0 * lam), wa, wb)
    else:
        best_w = np.where(d + s >= 0.0, wa, wb)
    g_at = ga + s * (best_w - wa)
    res = lam * (best_w - m) ** 2 + d * best_w + mult.nu + g_at
    pick = res < -tol
    if not np.any(pick):
        return np.empty((0, 1)), np.empty(0)
    pts_all, seg_all = [best_w[pick]], [np.where(pick)[0]]
    if lam > 0.0:
        # Bracket each interior dip with points out to the parabola's roots;
        # the next relaxation then lifts the whole dip at once instead of
        # crawling toward the touch point one cut at a time.
        root = np.sqrt(np.maximum(-res[pick], 0.0) / lam)
        for frac in (0.25, 0.5, 0.75, 1.0):
            for sign in (-1.0, 1.0):
                pts_all.append(best_w[pick] + sign * frac * root)
                seg_all.append(np.where(pick)[0])
    pts = np.concatenate(pts_all)
    seg = np.concatenate(seg_all)
    pts = np.clip(pts, wa[seg], wb[seg])
    gs = ga[seg] + s[seg] * (pts - wa[seg])
    rs = lam * (pts - m) ** 2 + d * pts + mult.nu + gs
    uniq, inv = np.unique(pts, return_inverse=True)
    gmin = np.full(uniq.shape, np.inf)
    rmin = np.full(uniq.shape, np.inf)
    np.minimum.at(gmin, inv, gs)
    np.minimum.at(rmin, inv, rs)
    order = np.argsort(rmin, kind="stable")[:cap]
    return uniq[order][:, None], gmin[order]


def _initial_points(amb: MomentAmbiguitySet) -> np.ndarray:
    lo, hi = amb.support_lo, amb.support_hi
    corners = [np.array(c) for c in itertools.product(*zip(lo, hi))]
    mid = 0.5 * (lo + hi)
    pts = np.unique(np.array(corners + [mid]), axis=0)
    return pts


def _try_solve(pts: list, g: list, amb, opts) -> Optional[DualMultipliers]:
    try:
        return solve_subproblem(np.array(pts), np.array(g), amb, opts)
    except _UnboundedSubproblem:
        return None


def solve_dual_sip(payoff, amb: MomentAmbiguitySet,
                   opts: Optional[SolverOptions] = None) -> tuple[float, DualCertificate]:
    """Exchange method for the dual semi-infinite program.

    Starts from the support-box corners plus the midpoint, alternates the LP
    relaxation with an exact (or scanned) most-violated-point search, prunes
    constraints slacker than ``prune_slack``, and terminates when the worst
    residual is >= -feas_tol or the iteration cap is reached (``converged``
    is False in the latter case — never a silent wrong answer).  The
    recorded relaxation objective sequence is nonincreasing: if pruning ever
    raises the relaxed optimum, the full point list is restored and the LP
    re-solved before the value is recorded.  Returns (value in [0, 1],
    certificate).
    """
    opts = opts or SolverOptions()
    span = float(np.max(amb.support_hi - amb.support_lo))
    init = _initial_points(amb)
    init_g = payoff.evaluate(init)
    if getattr(payoff, "exact", False) and payoff.seg_lo.size <= 4096:
        # Seeding every segment knot leaves the LP tiny (3l+1 variables) but
        # usually makes the first relaxation tight up to intra-segment
        # quadratic touch points, collapsing the exchange loop to a couple of
        # iterations.  Knot payoffs come from the segment endpoint values, not
        # the pointwise evaluator: at a jump the constraint must hold against
        # the lower one-sided limit, so coincident points keep the minimum.
        cand = np.concatenate([init.ravel(), payoff.seg_lo, payoff.seg_hi])
        cand_g = np.concatenate([init_g, payoff.val_lo, payoff.val_hi])
        uniq, inv = np.unique(cand, return_inverse=True)
        gmin = np.full(uniq.shape, np.inf)
        np.minimum.at(gmin, inv, cand_g)
        init = uniq[:, None]
        init_g = gmin
    active_pts = [p for p in init]
    active_g = [float(v) for v in init_g]
    master_pts = list(active_pts)
    master_g = list(active_g)

    history: list[float] = []
    mult: Optional[DualMultipliers] = None
    residual = -np.inf
    w_star = None
    converged = False

    for _ in range(opts.max_iterations):
        mult = _try_solve(active_pts, active_g, amb, opts)
        if mult is None:
            # Unbounded relaxation: the active points cannot carry a
            # distribution with the required moments.  Reseed once with the
            # construction-grade atom grid (feasible there by construction).
            grid = dyadic_grid(amb.support_lo, amb.support_hi, FEASIBILITY_ATOMS)
            seeded = np.unique(np.vstack([np.array(master_pts), grid]), axis=0)
            active_pts = [p for p in seeded]
            active_g = [float(v) for v in payoff.evaluate(seeded)]
            master_pts = list(active_pts)
            master_g = list(active_g)
            mult = _try_solve(active_pts, active_g, amb, opts)
            if mult is None:
                raise SolverError(
                    "dual relaxation unbounded even after atom-grid reseeding; "
                    "ambiguity set likely infeasible at this resolution")
        if history and mult.objective > history[-1] + 1e-12 \
                and len(active_pts) < len(master_pts):
            active_pts = list(master_pts)
            active_g = list(master_g)
            mult = solve_subproblem(np.array(active_pts), np.array(active_g), amb, opts)
        history.append(mult.objective)

        w_star, residual, g_at = most_violated_point(mult, payoff, amb, opts)
        if residual >= -opts.feas_tol:
            converged = True
            break
        dists = np.max(np.abs(np.array(active_pts) - w_star), axis=1)
        if np.min(dists) <= 1e-13 * max(1.0, span):
            # stalled at LP tolerance on an existing point
            converged = residual >= -10.0 * opts.feas_tol
            break
        if getattr(payoff, "exact", False):
            new_pts, new_g = _violating_segment_points(mult, payoff, amb,
                                                       opts.feas_tol)
        else:
            new_pts, new_g = w_star[None, :], np.array([g_at])
        existing = np.array(active_pts)
        for p, gv in zip(new_pts, new_g):
            if np.min(np.max(np.abs(existing - p), axis=1)) <= 1e-15 * max(1.0, span):
                continue
            active_pts.append(p.copy())
            active_g.append(float(gv))
            master_pts.append(p.copy())
            master_g.append(float(gv))
        slack = _constraint_quad(mult, amb, np.array(active_pts)) + np.array(active_g)
        keep = slack <= opts.prune_slack
        keep[-1] = True
        active_pts = [p for p, k in zip(active_pts, keep) if k]
        active_g = [g for g, k in zip(active_g, keep) if k]

    raw = history[-1]
    value = float(min(max(raw, 0.0), 1.0))
    cert = DualCertificate(
        lam_lo=mult.lam_lo, lam_hi=mult.lam_hi, lam_cov=mult.lam_cov, nu=mult.nu,
        value=value, raw_value=float(raw),
        active_points=np.array(active_pts), residual=float(residual),
        iterations=len(history), converged=converged,
        objective_history=tuple(history))
    return value, cert


def dual_inner_value(x, u, v_next, dynamics, amb: MomentAmbiguitySet,
                     opts: Optional[SolverOptions] = None) -> tuple[float, DualCertificate]:
    """Worst-case E[v_next(f(x, u, w))] over the ambiguity set (dual route)."""
    payoff = payoff_from_value_function(v_next, dynamics, x, u,
                                        amb.support_lo, amb.support_hi)
    return solve_dual_sip(payoff, amb, opts)


def verify_certificate(cert: DualCertificate, payoff, amb: MomentAmbiguitySet,
                       opts: Optional[SolverOptions] = None) -> float:
    """Minimum constraint residual of a certificate, independently rechecked.

    Exact payoffs are re-minimized segment by segment (grid-free); scan
    payoffs are checked on a grid ``verify_factor`` times finer than the
    solver's scan, plus the certificate's own active points.
    """
    opts = opts or SolverOptions()
    mult = cert.multipliers()
    if getattr(payoff, "exact", False):
        _, residual, _ = most_violated_point(mult, payoff, amb, opts)
        return float(residual)
    fine = SolverOptions(
        feas_tol=opts.feas_tol, max_iterations=opts.max_iterations,
        scan_points=opts.scan_points * opts.verify_factor + 1,
        prune_slack=opts.prune_slack, verify_factor=opts.verify_factor,
        lp_tol=opts.lp_tol, nominal_atoms=opts.nominal_atoms, threads=opts.threads)
    _, residual, _ = most_violated_point(mult, payoff, amb, fine)
    if cert.active_points.size:
        vals = (_constraint_quad(mult, amb, cert.active_points)
                + payoff.evaluate(cert.active_points))
        residual = min(residual, float(np.min(vals)))
    return float(residual)
