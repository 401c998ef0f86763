"""Shared fixtures: the thermostat benchmark plus a moderate-resolution solve.

The fixtures pin the disturbance support used throughout the tests to the
half-width sqrt(3 * Sigma), which makes the uniform distribution on the
support attain the second-moment bound exactly (so "uniform truth" is a
member of the ambiguity set and nominal/robust comparisons are meaningful).
"""

import numpy as np
import pytest

import drsafe

# Uniform on [-W, W] has variance W**2 / 3; this half-width makes it 0.0625.
WIDE_HALF_WIDTH = float(np.sqrt(3.0 * 0.0625))
# Misestimated pre-truncation std used by the nominal controller fixtures.
TRUTH_STD = float(np.sqrt(0.0625 / 2.0))


@pytest.fixture(scope="session")
def tcl():
    return drsafe.tcl_preset()


@pytest.fixture(scope="session")
def wide_amb():
    return drsafe.MomentAmbiguitySet(
        support_lo=[-WIDE_HALF_WIDTH], support_hi=[WIDE_HALF_WIDTH],
        mean=[0.0], mean_tol=[0.1], second_moment=[[0.0625]])


@pytest.fixture(scope="session")
def grid151(tcl):
    return drsafe.build_grid([18.0], [23.0], [151], tcl.safe_region)


@pytest.fixture(scope="session")
def opts():
    return drsafe.SolverOptions(feas_tol=1e-9)


@pytest.fixture(scope="session")
def tcl151(tcl, wide_amb, grid151, opts):
    """Full-horizon robust recursion on a moderate grid, reused across tests."""
    return drsafe.solve_recursion(tcl.dynamics, tcl.safe_region, tcl.controls,
                                  tcl.horizon, grid151, ambiguity=wide_amb,
                                  opts=opts)
