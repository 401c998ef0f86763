"""Atomized primal oracle and nominal quadrature.

The reference values here are hand-derivable: linear payoffs pin the value
to the mean bound, even payoffs with a pinned mean collapse to the center
atom, and concave quadratics saturate the second-moment budget.  The oracle
is additionally self-validating -- the optimal weights it returns must be a
distribution satisfying the moment constraints.
"""

import numpy as np
import pytest

import drsafe


def _amb(lo, hi, mean, tol, sigma, scale=1.0, check=True):
    return drsafe.MomentAmbiguitySet(
        support_lo=[lo], support_hi=[hi], mean=[mean], mean_tol=[tol],
        second_moment=[[sigma]], scale=scale, check=check)


def test_constant_payoffs():
    amb = _amb(-1.0, 1.0, 0.0, 0.1, 0.5)
    val1, _ = drsafe.primal_value(amb, lambda w: np.ones(w.shape[0]))
    val0, _ = drsafe.primal_value(amb, lambda w: np.zeros(w.shape[0]))
    assert val1 == pytest.approx(1.0, abs=1e-9)
    assert val0 == pytest.approx(0.0, abs=1e-9)


def test_even_payoff_with_pinned_mean_collapses_to_center():
    # E w = 0 exactly and w**2 >= 0: the atom at 0 is worst case
    amb = _amb(-1.0, 1.0, 0.0, 0.0, 1.0)
    val, _ = drsafe.primal_value(amb, lambda w: w[:, 0] ** 2)
    assert val == pytest.approx(0.0, abs=1e-9)


def test_linear_payoff_attains_mean_bound():
    # min E w subject to |E w| <= 0.2 is exactly -0.2 for any atomization
    amb = _amb(-1.0, 1.0, 0.0, 0.2, 1.0)
    val, _ = drsafe.primal_value(amb, lambda w: w[:, 0])
    assert val == pytest.approx(-0.2, abs=1e-9)


def test_concave_payoff_saturates_variance_budget():
    # min E[-w**2] with E w = 0 and E w**2 <= 0.25 puts mass at +-1
    amb = _amb(-1.0, 1.0, 0.0, 0.0, 0.25)
    val, _ = drsafe.primal_value(amb, lambda w: -w[:, 0] ** 2)
    assert val == pytest.approx(-0.25, abs=1e-9)


def test_scale_relaxes_variance_budget():
    amb = _amb(-1.0, 1.0, 0.0, 0.0, 0.25, scale=2.0)
    val, _ = drsafe.primal_value(amb, lambda w: -w[:, 0] ** 2)
    assert val == pytest.approx(-0.5, abs=1e-9)


def test_refinement_is_monotone_nonincreasing():
    amb = _amb(-1.0, 1.0, 0.0, 0.05, 0.3)
    payoff = lambda w: np.abs(w[:, 0] - 0.3)
    vals = [drsafe.primal_value(amb, payoff, atoms_per_dim=k)[0]
            for k in (65, 257, 1025, 4097)]
    for coarse, fine in zip(vals, vals[1:]):
        assert fine <= coarse + 1e-9


def test_returned_weights_form_a_feasible_distribution(wide_amb):
    payoff = lambda w: np.clip(w[:, 0] + 0.2, 0.0, 1.0)
    val, weights = drsafe.primal_value(wide_amb, payoff, atoms_per_dim=1025)
    pts = np.linspace(wide_amb.support_lo[0], wide_amb.support_hi[0],
                      weights.shape[0])
    assert weights.min() >= -1e-12
    assert abs(weights.sum() - 1.0) <= 1e-9
    mean = np.dot(weights, pts)
    assert abs(mean - wide_amb.mean[0]) <= wide_amb.mean_tol[0] + 1e-8
    var = np.dot(weights, (pts - wide_amb.mean[0]) ** 2)
    assert var <= wide_amb.scale * wide_amb.second_moment[0, 0] + 1e-8
    assert np.dot(weights, payoff(pts[:, None])) == pytest.approx(val, abs=1e-10)


def test_infeasible_grid_raises():
    amb = _amb(0.0, 1.0, 5.0, 0.1, 1.0, check=False)
    with pytest.raises(drsafe.AtomGridInfeasibleError):
        drsafe.primal_value(amb, lambda w: w[:, 0])


def test_nominal_expectation_constant():
    uni = drsafe.NominalDistribution(kind="uniform", lo=[-1.0], hi=[1.0])
    tn = drsafe.NominalDistribution(kind="truncated-normal", lo=[-1.0],
                                    hi=[1.0], mean=[0.3], std=[0.4])
    assert drsafe.nominal_expectation(uni, lambda w: np.ones(w.shape[0])) \
        == pytest.approx(1.0, abs=1e-12)
    assert drsafe.nominal_expectation(tn, lambda w: np.ones(w.shape[0])) \
        == pytest.approx(1.0, abs=1e-12)


def test_nominal_expectation_uniform_moments():
    uni = drsafe.NominalDistribution(kind="uniform", lo=[-1.0], hi=[1.0])
    # midpoint atoms are symmetric, so the mean is exact
    assert drsafe.nominal_expectation(uni, lambda w: w[:, 0]) \
        == pytest.approx(0.0, abs=1e-12)
    # E w**2 = 1/3 up to the midpoint-rule quadrature error
    assert drsafe.nominal_expectation(uni, lambda w: w[:, 0] ** 2) \
        == pytest.approx(1.0 / 3.0, abs=1e-4)


def test_nominal_expectation_atoms_is_exact_dot():
    nom = drsafe.NominalDistribution(kind="atoms", lo=[0.0], hi=[1.0],
                                     points=[[0.0], [0.5], [1.0]],
                                     weights=[0.2, 0.3, 0.5])
    val = drsafe.nominal_expectation(nom, lambda w: w[:, 0] ** 3)
    assert val == pytest.approx(0.2 * 0.0 + 0.3 * 0.125 + 0.5 * 1.0, abs=1e-15)
