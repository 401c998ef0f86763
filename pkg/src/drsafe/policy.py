"""Probabilistic safe sets and the safety-oriented switching controller.

The level-alpha safe set at stage t collects the states whose stage value is
at least alpha.  Off-node membership is decided conservatively: a state
belongs to the set only if every vertex of its grid cell does (states
exactly on grid lines collapse those dimensions to the node itself).

The controller keeps whatever fallback control is supplied while that is
provably harmless — i.e. every admissible control maps the state into the
next stage's safe set for every support disturbance — and otherwise applies
the stored worst-case-optimal table.  For affine dynamics the disturbance
image is covered exactly by its bounding box; other dynamics are probed at
support corners and the midpoint.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .bellman import StateGrid, ValueFunction
from .errors import ConfigurationError
from .model import ControlSet, Dynamics, SafeRegion

_NODE_SNAP = 1e-9  # fraction of a cell within which a coordinate counts as on-node


@dataclass(frozen=True)
class SafeSetFamily:
    """Node masks of {x : v_t(x) >= alpha} for t = 0..T."""

    alpha: float
    grid: StateGrid
    region: SafeRegion
    masks: np.ndarray  # bool, shape (T+1, *grid.shape)

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigurationError(f"alpha must be in (0, 1], got {self.alpha}")
        m = np.asarray(self.masks, dtype=bool)
        m = m.reshape((m.shape[0],) + self.grid.shape)
        m.flags.writeable = False
        object.__setattr__(self, "masks", m)

    @property
    def horizon(self) -> int:
        return self.masks.shape[0] - 1

    def member(self, points: np.ndarray, t: int) -> np.ndarray:
        """Conservative membership for points of shape (N, n) at stage t."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.grid.dim)
        mask_t = self.masks[t]
        n = self.grid.dim
        lo_idx = []
        hi_idx = []
        for d in range(n):
            h = self.grid.spacing[d]
            t_d = (pts[:, d] - self.grid.lo[d]) / h
            nearest = np.round(t_d)
            on_node = np.abs(t_d - nearest) <= _NODE_SNAP
            lo = np.where(on_node, nearest, np.floor(t_d)).astype(int)
            hi = np.where(on_node, nearest, np.floor(t_d) + 1).astype(int)
            lo_idx.append(np.clip(lo, 0, int(self.grid.nodes[d]) - 1))
            hi_idx.append(np.clip(hi, 0, int(self.grid.nodes[d]) - 1))
        result = np.ones(pts.shape[0], dtype=bool)
        for corner in itertools.product((0, 1), repeat=n):
            gather = tuple(hi_idx[d] if bit else lo_idx[d]
                           for d, bit in enumerate(corner))
            result &= mask_t[gather]
        result &= self.region.contains(pts)
        return result

    def member_box(self, lo_pts: np.ndarray, hi_pts: np.ndarray,
                   t: int) -> np.ndarray:
        """Conservative membership of whole axis-aligned boxes at stage t.

        A box belongs to the set only if it lies inside the safe region and
        every node of every grid cell it intersects is in the mask; this
        bounds membership of every point of the box from below.  Inputs are
        (N, n) lower and upper corners.
        """
        lo_pts = np.asarray(lo_pts, dtype=float).reshape(-1, self.grid.dim)
        hi_pts = np.asarray(hi_pts, dtype=float).reshape(-1, self.grid.dim)
        mask_t = self.masks[t]
        n = self.grid.dim
        inside = (np.all(lo_pts >= self.region.lo, axis=1)
                  & np.all(hi_pts <= self.region.hi, axis=1)
                  & np.all(lo_pts <= hi_pts, axis=1))
        lo_idx = []
        hi_idx = []
        for d in range(n):
            h = self.grid.spacing[d]
            tl = (lo_pts[:, d] - self.grid.lo[d]) / h
            th = (hi_pts[:, d] - self.grid.lo[d]) / h
            nl = np.round(tl)
            nh = np.round(th)
            tl = np.where(np.abs(tl - nl) <= _NODE_SNAP, nl, tl)
            th = np.where(np.abs(th - nh) <= _NODE_SNAP, nh, th)
            last = int(self.grid.nodes[d]) - 1
            lo_idx.append(np.clip(np.floor(tl), 0, last).astype(int))
            hi_idx.append(np.clip(np.ceil(th), 0, last).astype(int))
        if n == 1:
            bad = np.concatenate([[0], np.cumsum(~mask_t)])
            ok = bad[hi_idx[0] + 1] - bad[lo_idx[0]] == 0
            return ok & inside
        out = np.zeros(lo_pts.shape[0], dtype=bool)
        for i in np.flatnonzero(inside):
            sl = tuple(slice(lo_idx[d][i], hi_idx[d][i] + 1) for d in range(n))
            out[i] = bool(mask_t[sl].all())
        return out

    def counts(self) -> np.ndarray:
        return self.masks.reshape(self.masks.shape[0], -1).sum(axis=1)


def threshold(values: Sequence[ValueFunction], alpha: float) -> SafeSetFamily:
    """Level sets {v_t >= alpha} on the value functions' common grid."""
    if not values:
        raise ConfigurationError("need at least one value function")
    grid = values[0].grid
    region = values[0].region
    masks = np.stack([vf.values >= alpha for vf in values])
    return SafeSetFamily(alpha=float(alpha), grid=grid, region=region, masks=masks)


Fallback = Union[int, Callable[[np.ndarray, int], int]]


@dataclass(frozen=True)
class SafetyOrientedController:
    """Fallback-when-safe / optimal-table-otherwise switching policy.

    ``policies`` are the per-stage argmax tables from the recursion (shape
    (T, *grid.shape), control indices).  ``supports`` holds the per-stage
    disturbance box (lo, hi) used for probing.  ``fallback`` is a constant
    control index or a callable (x, t) -> index.
    """

    safe_sets: SafeSetFamily
    policies: np.ndarray
    dynamics: Dynamics
    control_set: ControlSet
    supports: tuple  # ((lo, hi), ...) length T
    fallback: Fallback = 0

    def __post_init__(self):
        pol = np.asarray(self.policies, dtype=int)
        pol = pol.reshape((self.safe_sets.horizon,) + self.safe_sets.grid.shape)
        pol.flags.writeable = False
        object.__setattr__(self, "policies", pol)
        if len(self.supports) != self.safe_sets.horizon:
            raise ConfigurationError("need one disturbance support per stage")
        if isinstance(self.fallback, (int, np.integer)):
            if not (0 <= int(self.fallback) < self.control_set.count):
                raise ConfigurationError("fallback control index out of range")

    def _probes(self, t: int) -> np.ndarray:
        lo, hi = self.supports[t]
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        corners = [np.array(c) for c in itertools.product(*zip(lo, hi))]
        return np.unique(np.array(corners + [0.5 * (lo + hi)]), axis=0)

    def _image_box(self, states: np.ndarray, u: np.ndarray,
                   t: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact per-state bounding box of f(x, u, W) for affine dynamics.

        Each coordinate of the image is affine in w, so its range over the
        support box is attained at support corners.
        """
        aff = self.dynamics.affine
        lo, hi = self.supports[t]
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        base = states @ aff.a_x.T + (aff.b_u @ u + aff.c)
        img_lo = np.full_like(base, np.inf)
        img_hi = np.full_like(base, -np.inf)
        for cw in itertools.product(*zip(lo, hi)):
            img = base + aff.g_w @ np.asarray(cw, dtype=float)
            img_lo = np.minimum(img_lo, img)
            img_hi = np.maximum(img_hi, img)
        return img_lo, img_hi

    def _fallback_index(self, x: np.ndarray, t: int) -> int:
        if isinstance(self.fallback, (int, np.integer)):
            k = int(self.fallback)
        else:
            k = int(self.fallback(x, t))
        mask = self.control_set.mask_at(x)
        if mask[k]:
            return k
        if not mask.any():
            return k
        # nearest admissible control, lowest index on ties
        dist = np.linalg.norm(self.control_set.controls
                              - self.control_set.controls[k], axis=1)
        dist[~mask] = np.inf
        return int(np.argmin(dist))

    def all_safe_next(self, x, t: int) -> bool:
        """True when every admissible control keeps the whole disturbance
        image inside the stage-(t+1) safe set.

        Affine dynamics get the exact image bounding box checked cell by
        cell; otherwise support corners plus the midpoint are probed.
        """
        x = np.asarray(x, dtype=float).reshape(self.dynamics.state_dim)
        mask = self.control_set.mask_at(x)
        if self.dynamics.affine is not None:
            states = x[None, :]
            for k in np.flatnonzero(mask):
                box = self._image_box(states, self.control_set.controls[k], t)
                if not self.safe_sets.member_box(box[0], box[1], t + 1).all():
                    return False
            return True
        probes = self._probes(t)
        for k in np.flatnonzero(mask):
            nxt = self.dynamics.step_w_batch(x, self.control_set.controls[k], probes)
            if not self.safe_sets.member(nxt, t + 1).all():
                return False
        return True

    def _nearest_node(self, x: np.ndarray) -> tuple:
        idx = []
        for d in range(self.safe_sets.grid.dim):
            t_d = (x[d] - self.safe_sets.grid.lo[d]) / self.safe_sets.grid.spacing[d]
            i = np.floor(t_d + 0.5)
            if t_d + 0.5 == np.floor(t_d + 0.5):  # exact .5 fraction: prefer lower
                i = i - 1
            idx.append(int(np.clip(i, 0, int(self.safe_sets.grid.nodes[d]) - 1)))
        return tuple(idx)

    def act(self, x, t: int) -> tuple[int, str]:
        """Control index and branch ('fallback' or 'policy') for state x at t."""
        x = np.asarray(x, dtype=float).reshape(self.dynamics.state_dim)
        if self.all_safe_next(x, t):
            return self._fallback_index(x, t), "fallback"
        return int(self.policies[t][self._nearest_node(x)]), "policy"

    def act_batch(self, states: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized act over (N, n) states: (indices, fallback-branch mask)."""
        states = np.asarray(states, dtype=float).reshape(-1, self.dynamics.state_dim)
        n_states = states.shape[0]
        all_safe = np.ones(n_states, dtype=bool)
        if self.control_set.admissible is not None:
            all_safe = np.array([self.all_safe_next(s, t) for s in states])
        elif self.dynamics.affine is not None:
            for k in range(self.control_set.count):
                box = self._image_box(states, self.control_set.controls[k], t)
                all_safe &= self.safe_sets.member_box(box[0], box[1], t + 1)
                if not all_safe.any():
                    break
        else:
            probes = self._probes(t)
            for k in range(self.control_set.count):
                u = self.control_set.controls[k]
                for p in probes:
                    nxt = _step_state_batch(self.dynamics, states, u, p)
                    all_safe &= self.safe_sets.member(nxt, t + 1)
                if not all_safe.any():
                    break
        out = np.empty(n_states, dtype=int)
        for i in np.flatnonzero(all_safe):
            out[i] = self._fallback_index(states[i], t)
        for i in np.flatnonzero(~all_safe):
            out[i] = int(self.policies[t][self._nearest_node(states[i])])
        return out, all_safe


def _step_state_batch(dynamics: Dynamics, states: np.ndarray, u: np.ndarray,
                      w: np.ndarray) -> np.ndarray:
    """f(x_i, u, w) for a batch of states with one control and disturbance."""
    if dynamics.affine is not None:
        aff = dynamics.affine
        shift = aff.b_u @ u + aff.c + aff.g_w @ w
        return states @ aff.a_x.T + shift
    return np.stack([dynamics.step(x, u, w) for x in states])


def nearest_nodes(grid: StateGrid, states: np.ndarray) -> tuple:
    """Per-dimension nearest-node indices for (N, n) states, ties toward
    the lower coordinate."""
    states = np.asarray(states, dtype=float).reshape(-1, grid.dim)
    idx = []
    for d in range(grid.dim):
        t_d = (states[:, d] - grid.lo[d]) / grid.spacing[d]
        i = np.floor(t_d + 0.5)
        exact_half = t_d + 0.5 == i
        i = np.where(exact_half, i - 1, i)
        idx.append(np.clip(i, 0, int(grid.nodes[d]) - 1).astype(int))
    return tuple(idx)


@dataclass(frozen=True)
class TablePolicy:
    """Always apply the stored per-stage argmax table (no fallback branch)."""

    grid: StateGrid
    control_set: ControlSet
    policies: np.ndarray  # (T, *grid.shape) control indices

    def __post_init__(self):
        pol = np.asarray(self.policies, dtype=int)
        pol = pol.reshape((pol.shape[0],) + self.grid.shape)
        pol.flags.writeable = False
        object.__setattr__(self, "policies", pol)

    def act(self, x, t: int) -> tuple[int, str]:
        x = np.asarray(x, dtype=float).reshape(1, self.grid.dim)
        idx = nearest_nodes(self.grid, x)
        return int(self.policies[t][tuple(i[0] for i in idx)]), "policy"

    def act_batch(self, states: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        idx = nearest_nodes(self.grid, states)
        ks = self.policies[t][idx]
        return ks.astype(int), np.zeros(ks.shape, dtype=bool)


def controller_table(ctl: SafetyOrientedController, t: int) -> list[tuple]:
    """Rows (node coords..., branch, control index, control...) at stage t."""
    grid = ctl.safe_sets.grid
    rows = []
    for flat, x in enumerate(grid.node_points()):
        k, branch = ctl.act(x, t)
        rows.append(tuple(x) + (branch, k) + tuple(ctl.control_set.controls[k]))
    return rows
