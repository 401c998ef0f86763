"""Dual semi-infinite solver: LP relaxation, violation search, exchange loop.

Reference points come from three independent directions: hand-solved tiny
LPs, the brute-force atomized primal oracle, and dense scans of the
constraint function.  The dual value must never exceed the atomized primal
(weak duality) and must match it at fine atomizations (strong duality for
piecewise-linear payoffs).
"""

import numpy as np
import pytest

import drsafe
from drsafe.dual_sip import DualMultipliers

from conftest import WIDE_HALF_WIDTH


def _amb(lo, hi, mean, tol, sigma, scale=1.0):
    return drsafe.MomentAmbiguitySet(
        support_lo=[lo], support_hi=[hi], mean=[mean], mean_tol=[tol],
        second_moment=[[sigma]], scale=scale)


def _residual(mult, amb, payoff_fn, w):
    """The semi-infinite constraint value at w, computed from scratch."""
    d = mult.lam_hi[0] - mult.lam_lo[0]
    return (w * d + mult.lam_cov[0] * (w - amb.mean[0]) ** 2 + mult.nu
            + payoff_fn(w))


# ---------------------------------------------------------------------------
# LP relaxation on finite point sets


def test_subproblem_single_center_point():
    # one constraint at w = mean with payoff 1: optimum is nu = -1, rest 0
    amb = _amb(-1.0, 1.0, 0.0, 0.0, 1.0)
    mult = drsafe.solve_subproblem(np.array([[0.0]]), np.array([1.0]), amb)
    assert mult.objective == pytest.approx(1.0, abs=1e-9)


def test_subproblem_symmetric_pair():
    # points +-1 with payoffs 0 / 1, mean pinned to 0, slack variance budget.
    # Summing the two constraints gives 2*Lam + 2*nu + 1 >= 0, so the
    # objective -10*Lam - nu is at most Lam + 1/2 <= 1/2; nu = delta = -1/2
    # attains it.  (Equal masses at +-1 are the matching primal witness.)
    amb = _amb(-1.0, 1.0, 0.0, 0.0, 10.0)
    mult = drsafe.solve_subproblem(np.array([[-1.0], [1.0]]),
                                   np.array([0.0, 1.0]), amb)
    assert mult.objective == pytest.approx(0.5, abs=1e-9)


def test_subproblem_relaxation_upper_bounds_the_sip(wide_amb, opts):
    payoff = drsafe.PiecewisePayoff1D.from_breakpoints(
        [-WIDE_HALF_WIDTH, -0.1, 0.05, WIDE_HALF_WIDTH],
        [0.2, 1.0, 0.0, 0.6])
    value, _ = drsafe.solve_dual_sip(payoff, wide_amb, opts)
    corners = np.array([[-WIDE_HALF_WIDTH], [0.0], [WIDE_HALF_WIDTH]])
    relaxed = drsafe.solve_subproblem(corners, payoff.evaluate(corners),
                                      wide_amb, opts)
    assert relaxed.objective >= value - 1e-9


# ---------------------------------------------------------------------------
# Most-violated-point search


def test_most_violated_scan_quadratic():
    amb = _amb(-1.0, 1.0, 0.0, 0.1, 1.0)
    payoff = drsafe.ScanPayoff(lambda w: (w[:, 0] - 0.3) ** 2, [-1.0], [1.0])
    zeros = DualMultipliers(lam_lo=np.zeros(1), lam_hi=np.zeros(1),
                            lam_cov=np.zeros(1), nu=0.0, objective=0.0)
    w_star, residual, _ = drsafe.most_violated_point(zeros, payoff, amb)
    assert w_star[0] == pytest.approx(0.3, abs=1e-6)
    assert residual == pytest.approx(0.0, abs=1e-9)


def test_most_violated_exact_quadratic_vertex():
    amb = _amb(-1.0, 1.0, 0.0, 0.1, 1.0)
    payoff = drsafe.PiecewisePayoff1D.from_breakpoints([-1.0, 1.0], [0.0, 0.0])
    mult = DualMultipliers(lam_lo=np.zeros(1), lam_hi=np.array([0.4]),
                           lam_cov=np.array([1.0]), nu=0.0, objective=0.0)
    w_star, residual, _ = drsafe.most_violated_point(mult, payoff, amb)
    # constraint is w**2 + 0.4 w, minimized at w = -0.2
    assert w_star[0] == pytest.approx(-0.2, abs=1e-12)
    assert residual == pytest.approx(-0.04, abs=1e-12)


def test_most_violated_exact_matches_dense_scan():
    amb = _amb(-WIDE_HALF_WIDTH, WIDE_HALF_WIDTH, 0.0, 0.1, 0.0625)
    bp = np.array([-WIDE_HALF_WIDTH, -0.25, -0.04, 0.11, 0.3,
                   WIDE_HALF_WIDTH])
    vals = np.array([0.55, 0.1, 0.85, 0.0, 0.9, 0.35])
    payoff = drsafe.PiecewisePayoff1D.from_breakpoints(bp, vals)
    mult = DualMultipliers(lam_lo=np.array([0.3]), lam_hi=np.array([0.1]),
                           lam_cov=np.array([0.8]), nu=0.05, objective=0.0)
    w_star, residual, _ = drsafe.most_violated_point(mult, payoff, amb)

    grid = np.linspace(-WIDE_HALF_WIDTH, WIDE_HALF_WIDTH, 1_000_001)
    res_grid = _residual(mult, amb, lambda w: np.interp(w, bp, vals), grid)
    k = int(np.argmin(res_grid))
    assert residual <= res_grid[k] + 1e-12  # exact search cannot be beaten
    # The minimizer may fall at a payoff kink between grid points; the grid
    # value then overshoots by at most (spacing/2) * local slope.
    assert residual == pytest.approx(res_grid[k], abs=1e-6)
    assert abs(w_star[0] - grid[k]) <= 2e-6


# ---------------------------------------------------------------------------
# Exchange solver end to end


def test_dual_sip_constant_payoffs(wide_amb, opts):
    ones = drsafe.PiecewisePayoff1D.from_breakpoints(
        [-WIDE_HALF_WIDTH, WIDE_HALF_WIDTH], [1.0, 1.0])
    zeros = drsafe.PiecewisePayoff1D.from_breakpoints(
        [-WIDE_HALF_WIDTH, WIDE_HALF_WIDTH], [0.0, 0.0])
    v1, cert1 = drsafe.solve_dual_sip(ones, wide_amb, opts)
    v0, cert0 = drsafe.solve_dual_sip(zeros, wide_amb, opts)
    assert v1 == pytest.approx(1.0, abs=1e-9)
    assert cert1.nu == pytest.approx(-1.0, abs=1e-7)
    assert v0 == pytest.approx(0.0, abs=1e-9)
    assert cert1.converged and cert0.converged


def test_dual_sip_clamps_to_unit_interval(wide_amb, opts):
    big = drsafe.PiecewisePayoff1D.from_breakpoints(
        [-WIDE_HALF_WIDTH, WIDE_HALF_WIDTH], [2.0, 2.0])
    value, cert = drsafe.solve_dual_sip(big, wide_amb, opts)
    assert value == 1.0
    assert cert.raw_value == pytest.approx(2.0, abs=1e-9)


def _terminal_payoff(tcl, grid151, x, u):
    v_t = drsafe.terminal(grid151, tcl.safe_region, tcl.horizon)
    return drsafe.payoff_from_value_function(
        v_t, tcl.dynamics, np.array([x]), np.array([u]),
        [-WIDE_HALF_WIDTH], [WIDE_HALF_WIDTH])


def test_dual_matches_primal_at_benchmark_anchor(tcl, grid151, wide_amb, opts):
    # last-stage inner problem at x = 20.5: dual vs fine atomized primal,
    # both with the mean pinned (tol 0) and with the default tolerance
    for tol in (0.0, 0.1):
        amb = wide_amb.with_params(mean_tol=[tol])
        for u in (0.0, 1.0):
            payoff = _terminal_payoff(tcl, grid151, 20.5, u)
            dual, cert = drsafe.solve_dual_sip(payoff, amb, opts)
            assert cert.converged
            primal, _ = drsafe.primal_value(amb, payoff.evaluate,
                                            atoms_per_dim=4097)
            assert dual <= primal + 1e-6
            assert dual == pytest.approx(primal, abs=1e-4)


def test_weak_duality_at_coarse_atomizations(tcl, grid151, wide_amb, opts):
    payoff = _terminal_payoff(tcl, grid151, 21.5, 0.0)
    dual, _ = drsafe.solve_dual_sip(payoff, wide_amb, opts)
    for count in (65, 257, 1025, 4097):
        primal, _ = drsafe.primal_value(wide_amb, payoff.evaluate,
                                        atoms_per_dim=count)
        assert dual <= primal + 1e-6


def test_certificate_invariants(tcl, grid151, wide_amb, opts):
    for x in (19.5, 20.5, 21.5):
        for u in (0.0, 1.0):
            payoff = _terminal_payoff(tcl, grid151, x, u)
            value, cert = drsafe.solve_dual_sip(payoff, wide_amb, opts)
            assert 0.0 <= value <= 1.0
            assert value == min(max(cert.raw_value, 0.0), 1.0)
            assert cert.converged
            assert cert.residual >= -1e-6
            hist = np.array(cert.objective_history)
            assert hist.size == cert.iterations
            assert np.all(np.diff(hist) <= 1e-10)
            assert hist[-1] == pytest.approx(cert.raw_value, abs=1e-12)
            recheck = drsafe.verify_certificate(cert, payoff, wide_amb, opts)
            assert recheck >= -1e-6


def test_random_piecewise_payoffs_close_duality_gap(opts):
    rng = np.random.default_rng(7)
    lo, hi = -0.5, 0.5
    lattice = np.linspace(lo, hi, 4097)
    for _ in range(5):
        k = int(rng.integers(5, 15))
        idx = np.unique(np.concatenate([[0, 4096], rng.integers(0, 4097, size=k)]))
        bp = lattice[idx]
        vals = rng.uniform(0.0, 1.0, size=bp.shape[0])
        payoff = drsafe.PiecewisePayoff1D.from_breakpoints(bp, vals)
        amb = _amb(lo, hi, float(rng.uniform(-0.05, 0.05)),
                   float(rng.uniform(0.0, 0.1)),
                   float(rng.uniform(0.02, 0.2)))
        dual, cert = drsafe.solve_dual_sip(payoff, amb, opts)
        assert cert.converged
        primal, _ = drsafe.primal_value(amb, payoff.evaluate,
                                        atoms_per_dim=4097)
        assert dual <= primal + 1e-6
        assert dual == pytest.approx(primal, abs=1e-4)


# ---------------------------------------------------------------------------
# Payoff construction from value functions


def test_payoff_matches_value_composition(tcl, grid151, tcl151):
    v1 = tcl151.values[1]
    x, u = np.array([20.9]), np.array([1.0])
    payoff = drsafe.payoff_from_value_function(
        v1, tcl.dynamics, x, u, [-WIDE_HALF_WIDTH], [WIDE_HALF_WIDTH])
    assert payoff.exact
    ws = np.linspace(-WIDE_HALF_WIDTH, WIDE_HALF_WIDTH, 101)[:, None]
    direct = v1.evaluate(tcl.dynamics.step_w_batch(x, u, ws))
    assert np.allclose(payoff.evaluate(ws), direct, atol=1e-12)


def test_payoff_segments_cover_support(tcl, grid151):
    v_t = drsafe.terminal(grid151, tcl.safe_region, tcl.horizon)
    payoff = drsafe.payoff_from_value_function(
        v_t, tcl.dynamics, np.array([21.9]), np.array([0.0]),
        [-WIDE_HALF_WIDTH], [WIDE_HALF_WIDTH])
    assert payoff.seg_lo[0] == pytest.approx(-WIDE_HALF_WIDTH, abs=1e-12)
    assert payoff.seg_hi[-1] == pytest.approx(WIDE_HALF_WIDTH, abs=1e-12)
    # segments tile the support without gaps
    assert np.allclose(payoff.seg_lo[1:], payoff.seg_hi[:-1], atol=1e-12)


def test_scan_fallback_agrees_with_exact_route(tcl, grid151, wide_amb, opts):
    aff = tcl.dynamics.affine

    def transition(x, u, w):
        return aff.apply(x, u, w)

    blackbox = drsafe.Dynamics(state_dim=1, control_dim=1, disturbance_dim=1,
                               transition=transition)
    v_t = drsafe.terminal(grid151, tcl.safe_region, tcl.horizon)
    exact_val, _ = drsafe.dual_inner_value(
        np.array([21.7]), np.array([0.0]), v_t, tcl.dynamics, wide_amb, opts)
    payoff = drsafe.payoff_from_value_function(
        v_t, blackbox, np.array([21.7]), np.array([0.0]),
        [-WIDE_HALF_WIDTH], [WIDE_HALF_WIDTH])
    assert not payoff.exact
    scan_val, cert = drsafe.solve_dual_sip(payoff, wide_amb, opts)
    assert scan_val == pytest.approx(exact_val, abs=1e-4)
    assert drsafe.verify_certificate(cert, payoff, wide_amb, opts) >= -1e-6
