"""Safe-set thresholding, conservative membership, switching controller."""

import numpy as np
import pytest

import drsafe

from conftest import WIDE_HALF_WIDTH

SUPPORT = (np.array([-WIDE_HALF_WIDTH]), np.array([WIDE_HALF_WIDTH]))


@pytest.fixture(scope="module")
def family(tcl151):
    return drsafe.threshold(tcl151.values, 0.95)


@pytest.fixture(scope="module")
def controller(tcl, tcl151, family):
    return drsafe.SafetyOrientedController(
        safe_sets=family, policies=np.stack(tcl151.policies),
        dynamics=tcl.dynamics, control_set=tcl.controls,
        supports=tuple(SUPPORT for _ in range(tcl.horizon)), fallback=0)


def test_threshold_alpha_validation(tcl151):
    with pytest.raises(drsafe.ConfigurationError):
        drsafe.threshold(tcl151.values, 1.0 + 1e-9)
    with pytest.raises(drsafe.ConfigurationError):
        drsafe.threshold(tcl151.values, 0.0)
    with pytest.raises(drsafe.ConfigurationError):
        drsafe.threshold([], 0.5)


def test_threshold_alpha_one_keeps_only_certainty(tcl151):
    family = drsafe.threshold(tcl151.values, 1.0)
    for t, vf in enumerate(tcl151.values):
        assert np.array_equal(family.masks[t], vf.values >= 1.0)
    # the terminal stage is certain on the whole region
    assert family.masks[-1].sum() == 91


def test_threshold_tiny_alpha_recovers_positive_support(tcl151):
    family = drsafe.threshold(tcl151.values, 1e-12)
    assert family.masks[-1].sum() == 91
    for t, vf in enumerate(tcl151.values):
        assert np.array_equal(family.masks[t], vf.values >= 1e-12)


def test_safe_sets_grow_with_remaining_time(family):
    # fewer stages left to survive -> larger set
    for t in range(family.horizon):
        assert np.all(family.masks[t] <= family.masks[t + 1])


def test_safe_sets_shrink_with_alpha(tcl151):
    loose = drsafe.threshold(tcl151.values, 0.90)
    tight = drsafe.threshold(tcl151.values, 0.97)
    assert np.all(tight.masks <= loose.masks)


def test_level_sets_are_few_intervals_strictly_inside(family):
    for t in (17, 0):
        mask = family.masks[t]
        runs = int(np.sum(np.diff(mask.astype(int)) == 1) + mask[0])
        assert runs <= 2
        idx = np.flatnonzero(mask)
        if idx.size:
            assert idx[0] > 30 and idx[-1] < 120  # excludes 19.0 and 22.0


def test_member_is_conservative_off_node(family):
    mask = family.masks[17]
    idx = np.flatnonzero(mask)
    assert idx.size > 2
    edge = idx[-1]  # last node in the set; its right neighbor is not
    assert not mask[edge + 1]
    xs = family.grid.coords(0)
    mid = 0.5 * (xs[edge] + xs[edge + 1])
    inner = 0.5 * (xs[edge - 1] + xs[edge])
    assert not family.member(np.array([[mid]]), 17)[0]
    assert family.member(np.array([[inner]]), 17)[0]


def test_member_snaps_points_on_grid_lines(family):
    mask = family.masks[17]
    edge = np.flatnonzero(mask)[-1]
    xs = family.grid.coords(0)
    h = family.grid.spacing[0]
    # within the snap tolerance of the node the bad neighbor is ignored
    assert family.member(np.array([[xs[edge] + 1e-10 * h]]), 17)[0]


def test_member_box_requires_every_crossed_cell(tcl):
    grid = drsafe.build_grid([0.0], [10.0], [11], drsafe.SafeRegion([0.0], [10.0]))
    mask = np.ones((1, 11), dtype=bool)
    mask[0, 5] = False
    family = drsafe.SafeSetFamily(alpha=0.5, grid=grid,
                                  region=drsafe.SafeRegion([0.0], [10.0]),
                                  masks=mask)
    ok = family.member_box(np.array([[1.0]]), np.array([[3.0]]), 0)
    crossing = family.member_box(np.array([[3.0]]), np.array([[7.0]]), 0)
    degenerate = family.member_box(np.array([[4.2]]), np.array([[4.2]]), 0)
    outside = family.member_box(np.array([[9.0]]), np.array([[11.0]]), 0)
    assert ok[0]
    assert not crossing[0]
    assert degenerate[0] == family.member(np.array([[4.2]]), 0)[0]
    assert not outside[0]


def _brute_all_safe(ctl, family, x, t, n_w=1001):
    ws = np.linspace(-WIDE_HALF_WIDTH, WIDE_HALF_WIDTH, n_w)[:, None]
    for k in range(ctl.control_set.count):
        nxt = ctl.dynamics.step_w_batch(np.array([x]),
                                        ctl.control_set.controls[k], ws)
        if not family.member(nxt, t + 1).all():
            return False
    return True


def test_all_safe_next_matches_dense_sampling(controller, family):
    for t in (0, 10, 17):
        for x in np.linspace(19.05, 21.95, 30):
            assert controller.all_safe_next([x], t) \
                == _brute_all_safe(controller, family, x, t)


def test_all_safe_next_false_on_empty_set(tcl, tcl151):
    family = drsafe.threshold(tcl151.values, 1.0)
    ctl = drsafe.SafetyOrientedController(
        safe_sets=family, policies=np.stack(tcl151.policies),
        dynamics=tcl.dynamics, control_set=tcl.controls,
        supports=tuple(SUPPORT for _ in range(tcl.horizon)), fallback=0)
    # stage-1 certainty set is empty at this resolution, so nothing is safe
    if not family.masks[1].any():
        assert not ctl.all_safe_next([20.5], 0)


def test_act_branches(controller, family):
    probe = None
    for x in np.linspace(19.05, 21.95, 60):
        if controller.all_safe_next([x], 17):
            probe = x
            break
    assert probe is not None
    k, branch = controller.act([probe], 17)
    assert branch == "fallback" and k == 0

    k, branch = controller.act([21.99], 0)  # deep-horizon edge state
    if not controller.all_safe_next([21.99], 0):
        assert branch == "policy"
        node = controller._nearest_node(np.array([21.99]))
        assert k == int(controller.policies[0][node])


def test_act_outside_region_uses_policy_table(controller):
    k, branch = controller.act([22.5], 5)
    assert branch == "policy"
    assert k in (0, 1)


def test_fallback_redirects_to_nearest_admissible(tcl, grid151):
    masks = np.ones((2, 151), dtype=bool)
    family = drsafe.SafeSetFamily(alpha=0.5, grid=grid151,
                                  region=tcl.safe_region, masks=masks)
    controls = drsafe.ControlSet(
        controls=[[0.0], [1.0]],
        admissible=lambda x: np.array([x[0] < 21.0, True]))
    tiny = (np.array([-0.01]), np.array([0.01]))
    ctl = drsafe.SafetyOrientedController(
        safe_sets=family, policies=np.zeros((1, 151), dtype=int),
        dynamics=tcl.dynamics, control_set=controls, supports=(tiny,),
        fallback=0)
    k, branch = ctl.act([21.5], 0)
    assert branch == "fallback"
    assert k == 1  # heater-off is inadmissible here


def test_act_batch_matches_scalar_act(controller):
    rng = np.random.default_rng(2)
    states = rng.uniform(19.0, 22.4, size=(40, 1))
    for t in (0, 17):
        ks, fb = controller.act_batch(states, t)
        singles = [controller.act(s, t) for s in states]
        assert list(ks) == [k for k, _ in singles]
        assert list(fb) == [branch == "fallback" for _, branch in singles]


def test_callable_fallback(tcl, tcl151, family):
    ctl = drsafe.SafetyOrientedController(
        safe_sets=family, policies=np.stack(tcl151.policies),
        dynamics=tcl.dynamics, control_set=tcl.controls,
        supports=tuple(SUPPORT for _ in range(tcl.horizon)),
        fallback=lambda x, t: 1)
    for x in np.linspace(19.05, 21.95, 60):
        k, branch = ctl.act([x], 17)
        if branch == "fallback":
            assert k == 1
            break
    else:
        pytest.fail("no fallback state found at stage 17")


def test_table_policy_lookup(tcl, grid151, tcl151):
    table = drsafe.TablePolicy(grid=grid151, control_set=tcl.controls,
                               policies=np.stack(tcl151.policies))
    k, branch = table.act([19.05], 5)
    assert branch == "policy"
    expected = int(np.stack(tcl151.policies)[5][
        drsafe.nearest_nodes(grid151, np.array([[19.05]]))][0])
    assert k == expected
    ks, fb = table.act_batch(np.array([[19.05], [21.0]]), 5)
    assert ks[0] == k and not fb.any()


def test_nearest_nodes_ties_go_low():
    # Dyadic spacing so the midpoint between nodes is exactly representable.
    grid = drsafe.StateGrid(lo=[0.0], hi=[1.0], nodes=[5])
    idx = drsafe.nearest_nodes(grid, np.array([[0.375], [0.375 + 1e-9]]))
    assert idx[0][0] == 1
    assert idx[0][1] == 2


def test_controller_table_rows(controller, grid151):
    rows = drsafe.controller_table(controller, 17)
    assert len(rows) == 151
    x, branch, k, u = rows[75]
    assert x == pytest.approx(20.5)
    assert branch in ("fallback", "policy")
    assert k in (0, 1) and u in (0.0, 1.0)


def test_counts(family):
    counts = family.counts()
    assert counts.shape == (19,)
    assert counts[-1] == 91
    assert np.all(np.diff(counts) >= 0)
