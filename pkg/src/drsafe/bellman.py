"""Backward recursion for worst-case (or nominal) safety probabilities.

Value functions live on a uniform state grid whose lines fall exactly on the
safe-region boundaries; they interpolate multilinearly inside the region and
are identically zero outside it, so the discontinuity at the boundary is
never smeared.  The terminal value is the safe-region indicator; each backup
maximizes over the finite control list the worst-case (dual solver) or
nominal (quadrature) expectation of the next value.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .ambiguity import MomentAmbiguitySet, NominalDistribution
from .dual_sip import SolverOptions, dual_inner_value
from .errors import ConfigurationError
from .model import ControlSet, Dynamics, SafeRegion
from .oracle import nominal_expectation

log = logging.getLogger(__name__)


def _frozen(a, dtype=float):
    out = np.asarray(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class StateGrid:
    """Uniform per-dimension grid on a box that contains the safe region.

    Every safe-region boundary must sit exactly on a grid line (checked to
    1e-9 of a cell); for affine dynamics the box must also contain the
    one-step reachable envelope of the safe region, so interpolation is
    never extrapolation.
    """

    lo: np.ndarray
    hi: np.ndarray
    nodes: np.ndarray  # ints, per dimension

    def __post_init__(self):
        lo = _frozen(np.atleast_1d(self.lo))
        hi = _frozen(np.atleast_1d(self.hi))
        nodes = _frozen(np.atleast_1d(self.nodes), dtype=int)
        if not (lo.shape == hi.shape == nodes.shape) or lo.ndim != 1:
            raise ConfigurationError("grid lo/hi/nodes must be 1-D and equal length")
        if np.any(nodes < 2):
            raise ConfigurationError("grid needs >= 2 nodes per dimension")
        if np.any(hi <= lo):
            raise ConfigurationError("grid box must satisfy lo < hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "nodes", nodes)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.nodes - 1)

    @property
    def shape(self) -> tuple:
        return tuple(int(n) for n in self.nodes)

    def coords(self, d: int) -> np.ndarray:
        return np.linspace(self.lo[d], self.hi[d], int(self.nodes[d]))

    def node_points(self) -> np.ndarray:
        axes = [self.coords(d) for d in range(self.dim)]
        if self.dim == 1:
            return axes[0][:, None]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def check_alignment(self, region: SafeRegion) -> None:
        h = self.spacing
        for bound in (region.lo, region.hi):
            if np.any(bound < self.lo - 1e-9 * h) or np.any(bound > self.hi + 1e-9 * h):
                raise ConfigurationError("safe region must lie inside the grid box")
            steps = (bound - self.lo) / h
            if np.any(np.abs(steps - np.round(steps)) > 1e-9):
                raise ConfigurationError(
                    "safe-region boundaries must fall exactly on grid lines "
                    f"(offsets {steps})")

    def check_envelope(self, region: SafeRegion, dynamics: Dynamics,
                       control_set: ControlSet, support_lo, support_hi) -> None:
        """For affine dynamics: grid box must cover one-step images of A."""
        if dynamics.affine is None:
            return
        aff = dynamics.affine
        lo_env = aff.c.copy()
        hi_env = aff.c.copy()
        for mat, blo, bhi in ((aff.a_x, region.lo, region.hi),
                              (aff.g_w, np.atleast_1d(np.asarray(support_lo, float)),
                               np.atleast_1d(np.asarray(support_hi, float)))):
            pos = np.clip(mat, 0.0, None)
            neg = np.clip(mat, None, 0.0)
            lo_env = lo_env + pos @ blo + neg @ bhi
            hi_env = hi_env + pos @ bhi + neg @ blo
        bu = control_set.controls @ aff.b_u.T  # (k, n)
        lo_env = lo_env + bu.min(axis=0)
        hi_env = hi_env + bu.max(axis=0)
        if np.any(lo_env < self.lo - 1e-9) or np.any(hi_env > self.hi + 1e-9):
            raise ConfigurationError(
                f"grid box [{self.lo}, {self.hi}] does not contain the one-step "
                f"reachable envelope [{lo_env}, {hi_env}] of the safe region")


def build_grid(lo, hi, nodes, region: SafeRegion, dynamics: Optional[Dynamics] = None,
               control_set: Optional[ControlSet] = None,
               support_lo=None, support_hi=None) -> StateGrid:
    """Construct a grid and enforce the alignment/envelope contracts."""
    grid = StateGrid(lo=lo, hi=hi, nodes=nodes)
    grid.check_alignment(region)
    if dynamics is not None and control_set is not None and support_lo is not None:
        grid.check_envelope(region, dynamics, control_set, support_lo, support_hi)
    return grid


@dataclass(frozen=True)
class ValueFunction:
    """A stage value on a grid: multilinear inside the region, zero outside."""

    stage: int
    grid: StateGrid
    region: SafeRegion
    values: np.ndarray  # shaped grid.shape, entries in [0, 1]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.grid.dim)
        inside = self.region.contains(pts)
        out = np.zeros(pts.shape[0])
        if not inside.any():
            return out
        p = pts[inside]
        n = self.grid.dim
        idx = []
        frac = []
        for d in range(n):
            h = self.grid.spacing[d]
            t = (p[:, d] - self.grid.lo[d]) / h
            i = np.clip(np.floor(t).astype(int), 0, int(self.grid.nodes[d]) - 2)
            idx.append(i)
            frac.append(np.clip(t - i, 0.0, 1.0))
        acc = np.zeros(p.shape[0])
        for corner in itertools.product((0, 1), repeat=n):
            weight = np.ones(p.shape[0])
            gather = []
            for d, bit in enumerate(corner):
                weight = weight * (frac[d] if bit else (1.0 - frac[d]))
                gather.append(idx[d] + bit)
            acc += weight * self.values[tuple(gather)]
        out[inside] = acc
        return out

    def inside_nodes_1d(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates and values inside the region (1-D grids only)."""
        if self.grid.dim != 1:
            raise ConfigurationError("inside_nodes_1d requires a 1-D grid")
        xs = self.grid.coords(0)
        mask = (xs >= self.region.lo[0]) & (xs <= self.region.hi[0])
        return xs[mask], self.values[mask]


def terminal(grid: StateGrid, region: SafeRegion, horizon: int) -> ValueFunction:
    """v_T = indicator of the safe region, exactly 0/1 at nodes."""
    pts = grid.node_points()
    vals = region.contains(pts).astype(float).reshape(grid.shape)
    return ValueFunction(stage=horizon, grid=grid, region=region, values=vals)


@dataclass(frozen=True)
class BackupResult:
    value: ValueFunction
    policy: np.ndarray  # argmax control indices, shaped grid.shape


def _node_backup(x, v_next, dynamics, control_set, region, ambiguity, nominal,
                 opts, allowed) -> tuple[float, int]:
    mask = control_set.mask_at(x)
    best_val = -np.inf
    best_u = -1
    for k in range(control_set.count):
        if not mask[k] or (allowed is not None and k not in allowed):
            continue
        u = control_set.controls[k]
        if ambiguity is not None:
            val, _ = dual_inner_value(x, u, v_next, dynamics, ambiguity, opts)
        else:
            val = nominal_expectation(
                nominal, lambda wb: v_next.evaluate(dynamics.step_w_batch(x, u, wb)),
                opts.nominal_atoms)
            val = min(max(val, 0.0), 1.0)
        if val > best_val:
            best_val = val
            best_u = k
    if best_u < 0:
        raise ConfigurationError(
            f"no admissible control at state {x} inside the safe region")
    return best_val, best_u


def backup(v_next: ValueFunction, dynamics: Dynamics, control_set: ControlSet,
           region: SafeRegion, ambiguity: Optional[MomentAmbiguitySet] = None,
           nominal: Optional[NominalDistribution] = None,
           opts: Optional[SolverOptions] = None,
           allowed_controls: Optional[Sequence[int]] = None) -> BackupResult:
    """One Bellman step: v_t(x) = 1_A(x) max_u (worst-case or nominal) E[v_{t+1}].

    Exactly one of ``ambiguity`` (robust mode) and ``nominal`` must be given.
    Ties across controls resolve to the lowest control index.  Nodes outside
    the region get value 0 and the lowest admissible control.  With
    ``opts.threads > 1`` nodes are processed by a thread pool; results are
    written by node index, so the output is identical for any thread count.
    """
    if (ambiguity is None) == (nominal is None):
        raise ConfigurationError("pass exactly one of ambiguity / nominal")
    opts = opts or SolverOptions()
    grid = v_next.grid
    pts = grid.node_points()
    inside = region.contains(pts)
    values = np.zeros(pts.shape[0])
    policy = np.zeros(pts.shape[0], dtype=int)
    allowed = None if allowed_controls is None else set(int(a) for a in allowed_controls)

    for i in np.flatnonzero(~inside):
        mask = control_set.mask_at(pts[i])
        policy[i] = int(np.argmax(mask)) if mask.any() else 0

    inside_idx = np.flatnonzero(inside)

    def work(i: int):
        return _node_backup(pts[i], v_next, dynamics, control_set, region,
                            ambiguity, nominal, opts, allowed)

    if opts.threads > 1 and inside_idx.size > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(work, inside_idx))
    else:
        results = [work(i) for i in inside_idx]
    for i, (val, k) in zip(inside_idx, results):
        values[i] = val
        policy[i] = k

    vf = ValueFunction(stage=v_next.stage - 1, grid=grid, region=region,
                       values=values.reshape(grid.shape))
    return BackupResult(value=vf, policy=policy.reshape(grid.shape))


AmbiguitySchedule = Union[MomentAmbiguitySet, Sequence[MomentAmbiguitySet]]


def _as_schedule(ambiguity: AmbiguitySchedule, horizon: int) -> list:
    if isinstance(ambiguity, MomentAmbiguitySet):
        return [ambiguity] * horizon
    sched = list(ambiguity)
    if len(sched) != horizon:
        raise ConfigurationError(
            f"ambiguity schedule has {len(sched)} entries for horizon {horizon}")
    return sched


@dataclass(frozen=True)
class RecursionResult:
    """values[t] is v_t for t = 0..T; policies[t] is the stage-t argmax table."""

    values: tuple
    policies: tuple
    mode: str

    @property
    def horizon(self) -> int:
        return len(self.values) - 1


def solve_recursion(dynamics: Dynamics, region: SafeRegion, control_set: ControlSet,
                    horizon: int, grid: StateGrid,
                    ambiguity: Optional[AmbiguitySchedule] = None,
                    nominal: Optional[NominalDistribution] = None,
                    opts: Optional[SolverOptions] = None) -> RecursionResult:
    """Run the backward recursion from v_T = 1_A down to v_0."""
    if horizon < 0:
        raise ConfigurationError("horizon must be >= 0")
    grid.check_alignment(region)
    opts = opts or SolverOptions()
    sched = _as_schedule(ambiguity, horizon) if ambiguity is not None else None
    values = [terminal(grid, region, horizon)]
    policies = []
    for t in range(horizon - 1, -1, -1):
        amb_t = sched[t] if sched is not None else None
        res = backup(values[-1], dynamics, control_set, region,
                     ambiguity=amb_t, nominal=nominal, opts=opts)
        values.append(res.value)
        policies.append(res.policy)
        log.info("stage %d done (mode=%s)", t, "robust" if amb_t is not None else "nominal")
    values.reverse()
    policies.reverse()
    return RecursionResult(values=tuple(values), policies=tuple(policies),
                           mode="robust" if ambiguity is not None else "nominal")
