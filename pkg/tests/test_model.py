"""System descriptions: affine transitions, safe regions, control sets."""

import numpy as np
import pytest

import drsafe
from drsafe.model import TCL_C, TCL_ETA, TCL_H, TCL_P, TCL_R, TCL_THETA

ALPHA = float(np.exp(-TCL_H / (TCL_R * TCL_C)))


def test_preset_structure(tcl):
    assert tcl.horizon == 18
    assert tcl.safe_region.lo[0] == 19.0
    assert tcl.safe_region.hi[0] == 22.0
    assert tcl.controls.controls.shape == (2, 1)
    assert tcl.controls.controls[0, 0] == 0.0
    assert tcl.controls.controls[1, 0] == 1.0
    aff = tcl.dynamics.affine
    assert aff is not None
    assert aff.a_x[0, 0] == pytest.approx(ALPHA, rel=1e-15)
    assert aff.g_w[0, 0] == 1.0


def test_step_heater_off(tcl):
    x1 = drsafe.step(tcl.dynamics, [20.0], [0.0], [0.0])
    expected = ALPHA * 20.0 + (1.0 - ALPHA) * TCL_THETA
    assert x1[0] == pytest.approx(expected, abs=1e-12)
    assert x1[0] > 20.0  # heater off still drifts toward the hot ambient


def test_step_heater_on_with_disturbance(tcl):
    x1 = drsafe.step(tcl.dynamics, [21.0], [1.0], [0.01])
    cooled = TCL_THETA - TCL_ETA * TCL_R * TCL_P  # 32 - 19.6
    expected = ALPHA * 21.0 + (1.0 - ALPHA) * cooled + 0.01
    assert x1[0] == pytest.approx(expected, abs=1e-12)
    assert x1[0] < 21.0  # heater on cools


def test_step_matches_affine_descriptor(tcl):
    aff = tcl.dynamics.affine
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.uniform(18, 23, size=1)
        u = rng.uniform(0, 1, size=1)
        w = rng.uniform(-0.4, 0.4, size=1)
        assert np.allclose(tcl.dynamics.step(x, u, w), aff.apply(x, u, w),
                           atol=1e-14)


def test_step_w_batch(tcl):
    ws = np.linspace(-0.3, 0.3, 7)[:, None]
    batch = tcl.dynamics.step_w_batch([20.5], [1.0], ws)
    singles = np.stack([tcl.dynamics.step([20.5], [1.0], w) for w in ws])
    assert np.allclose(batch, singles, atol=1e-14)


def test_zero_fixed_point():
    aff = drsafe.AffineDescriptor(a_x=[[1.0]], b_u=[[0.0]], c=[0.0], g_w=[[1.0]])
    dyn = drsafe.Dynamics(state_dim=1, control_dim=1, disturbance_dim=1,
                          transition=aff.apply, affine=aff)
    assert drsafe.step(dyn, [0.0], [0.0], [0.0])[0] == 0.0


def test_safe_region_boundary_inclusive():
    region = drsafe.SafeRegion(lo=[19.0], hi=[22.0])
    pts = np.array([[19.0], [22.0], [20.5], [18.999], [22.0001]])
    assert list(region.contains(pts)) == [True, True, True, False, False]


def test_safe_region_multidim():
    region = drsafe.SafeRegion(lo=[0.0, -1.0], hi=[1.0, 1.0])
    pts = np.array([[0.5, 0.0], [0.0, -1.0], [1.1, 0.0], [0.5, -1.01]])
    assert list(region.contains(pts)) == [True, True, False, False]


def test_control_set_basics():
    cs = drsafe.ControlSet(controls=[[0.0], [0.5], [1.0]])
    assert cs.count == 3
    assert cs.control_dim == 1
    assert cs.mask_at(np.array([5.0])).all()


def test_control_set_admissible_mask():
    cs = drsafe.ControlSet(
        controls=[[0.0], [1.0]],
        admissible=lambda x: np.array([True, x[0] < 20.0]))
    assert list(cs.mask_at(np.array([19.0]))) == [True, True]
    assert list(cs.mask_at(np.array([21.0]))) == [True, False]


def test_affine_descriptor_rejects_bad_shapes():
    with pytest.raises(drsafe.ConfigurationError):
        drsafe.AffineDescriptor(a_x=[[1.0, 0.0]], b_u=[[0.0]], c=[0.0],
                                g_w=[[1.0]])


def test_dynamics_requires_consistent_affine():
    aff = drsafe.AffineDescriptor(a_x=[[0.5]], b_u=[[1.0]], c=[0.0],
                                  g_w=[[1.0]])

    def other(x, u, w):
        return 0.6 * np.asarray(x) + np.asarray(u) + np.asarray(w)

    with pytest.raises(drsafe.ConfigurationError):
        drsafe.Dynamics(state_dim=1, control_dim=1, disturbance_dim=1,
                        transition=other, affine=aff)


def test_dynamics_without_affine_descriptor():
    def saturating(x, u, w):
        return np.tanh(np.asarray(x) + np.asarray(u)) + np.asarray(w)

    dyn = drsafe.Dynamics(state_dim=1, control_dim=1, disturbance_dim=1,
                          transition=saturating)
    assert dyn.affine is None
    out = dyn.step([0.2], [0.1], [0.05])
    assert out[0] == pytest.approx(np.tanh(0.3) + 0.05, abs=1e-14)


def test_step_rejects_wrong_dimensions(tcl):
    with pytest.raises(ValueError):
        tcl.dynamics.step([20.0, 21.0], [0.0], [0.0])
