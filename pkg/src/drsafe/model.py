"""System models: dynamics, safe regions, and finite control sets.

The controlled system is x_{t+1} = f(x_t, u_t, w_t) with state x in R^n,
control u drawn from a finite list of vectors in R^m, and disturbance w in
R^l.  When f is affine, an explicit descriptor (A_x, B_u, c, G_w) can be
attached; several solver fast paths key off it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError

Transition = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _frozen_array(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class AffineDescriptor:
    """Matrices of an affine transition x' = A_x x + B_u u + c + G_w w."""

    a_x: np.ndarray  # (n, n)
    b_u: np.ndarray  # (n, m)
    c: np.ndarray    # (n,)
    g_w: np.ndarray  # (n, l)

    def __post_init__(self):
        object.__setattr__(self, "a_x", _frozen_array(np.atleast_2d(self.a_x)))
        object.__setattr__(self, "b_u", _frozen_array(np.atleast_2d(self.b_u)))
        object.__setattr__(self, "c", _frozen_array(np.atleast_1d(self.c)))
        object.__setattr__(self, "g_w", _frozen_array(np.atleast_2d(self.g_w)))
        n = self.a_x.shape[0]
        if self.a_x.shape != (n, n):
            raise ConfigurationError("a_x must be square")
        if self.b_u.shape[0] != n or self.g_w.shape[0] != n or self.c.shape != (n,):
            raise ConfigurationError("affine descriptor row counts disagree")

    def apply(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.a_x @ x + self.b_u @ u + self.c + self.g_w @ w

    def apply_w_batch(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Evaluate the transition for a batch of disturbances, shape (N, l)."""
        base = self.a_x @ x + self.b_u @ u + self.c
        return base[None, :] + w @ self.g_w.T


@dataclass(frozen=True)
class Dynamics:
    """A deterministic transition map plus its dimensions.

    ``transition`` must be a pure function of (x, u, w); repeated calls with
    the same inputs must return bitwise-identical outputs.  ``affine``, when
    given, must agree with ``transition`` to 1e-12 (spot-checked here on a
    handful of points, and testable everywhere).
    """

    state_dim: int
    control_dim: int
    disturbance_dim: int
    transition: Transition
    affine: Optional[AffineDescriptor] = None

    def __post_init__(self):
        for name in ("state_dim", "control_dim", "disturbance_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.affine is not None:
            a = self.affine
            if a.a_x.shape[0] != self.state_dim or a.b_u.shape[1] != self.control_dim \
                    or a.g_w.shape[1] != self.disturbance_dim:
                raise ConfigurationError("affine descriptor dimensions disagree with dynamics")
            rng = np.random.default_rng(0)
            for _ in range(4):
                x = rng.standard_normal(self.state_dim)
                u = rng.standard_normal(self.control_dim)
                w = rng.standard_normal(self.disturbance_dim)
                if np.max(np.abs(self.transition(x, u, w) - a.apply(x, u, w))) > 1e-12:
                    raise ConfigurationError(
                        "affine descriptor disagrees with transition beyond 1e-12")

    def step(self, x, u, w) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.state_dim)
        u = np.asarray(u, dtype=float).reshape(self.control_dim)
        w = np.asarray(w, dtype=float).reshape(self.disturbance_dim)
        out = np.asarray(self.transition(x, u, w), dtype=float).reshape(self.state_dim)
        return out

    def step_w_batch(self, x, u, w_batch: np.ndarray) -> np.ndarray:
        """Transition under a batch of disturbances; (N, l) -> (N, n)."""
        x = np.asarray(x, dtype=float).reshape(self.state_dim)
        u = np.asarray(u, dtype=float).reshape(self.control_dim)
        w_batch = np.asarray(w_batch, dtype=float).reshape(-1, self.disturbance_dim)
        if self.affine is not None:
            return self.affine.apply_w_batch(x, u, w_batch)
        return np.stack([self.step(x, u, w) for w in w_batch])


def step(dynamics: Dynamics, x, u, w) -> np.ndarray:
    """One transition x' = f(x, u, w) with dimension checks."""
    return dynamics.step(x, u, w)


@dataclass(frozen=True)
class SafeRegion:
    """An axis-aligned box of per-dimension intervals; boundaries belong to it."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _frozen_array(np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", _frozen_array(np.atleast_1d(self.hi)))
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ConfigurationError("safe region lo/hi must be 1-D and equal length")
        if np.any(self.hi < self.lo):
            raise ConfigurationError("safe region has hi < lo")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boundary-inclusive membership for points of shape (..., n)."""
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)


@dataclass(frozen=True)
class ControlSet:
    """A finite list of control vectors with optional per-state admissibility.

    ``admissible`` maps a state to a boolean mask over the control list; the
    default admits every control everywhere.
    """

    controls: np.ndarray  # (k, m)
    admissible: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None)

    def __post_init__(self):
        ctl = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if ctl.shape[0] < 1:
            raise ConfigurationError("control set must be non-empty")
        object.__setattr__(self, "controls", _frozen_array(ctl))

    @property
    def count(self) -> int:
        return self.controls.shape[0]

    @property
    def control_dim(self) -> int:
        return self.controls.shape[1]

    def mask_at(self, x: np.ndarray) -> np.ndarray:
        if self.admissible is None:
            return np.ones(self.count, dtype=bool)
        mask = np.asarray(self.admissible(np.asarray(x, dtype=float)), dtype=bool)
        if mask.shape != (self.count,):
            raise ConfigurationError("admissibility predicate returned wrong-shaped mask")
        return mask


@dataclass(frozen=True)
class TclModel:
    """Bundle returned by :func:`tcl_preset`."""

    dynamics: Dynamics
    safe_region: SafeRegion
    controls: ControlSet
    horizon: int


# Thermostatically controlled load constants: thermal resistance R [degC/kW],
# capacitance C [kWh/degC], ambient theta [degC], step h [h], power P [kW],
# efficiency eta.
TCL_R = 2.0
TCL_C = 2.0
TCL_THETA = 32.0
TCL_H = 5.0 / 60.0
TCL_P = 14.0
TCL_ETA = 0.7


def tcl_preset() -> TclModel:
    """Scalar thermostatically controlled load with ON/OFF switching.

    x_{t+1} = a x_t + (1 - a)(theta - eta R P u_t) + w_t, a = exp(-h/(C R)),
    safe band A = [19, 22] degC, controls {0, 1}, horizon 18 (90 min at
    5-minute steps).
    """
    a = float(np.exp(-TCL_H / (TCL_C * TCL_R)))

    def transition(x, u, w):
        return a * x + (1.0 - a) * (TCL_THETA - TCL_ETA * TCL_R * TCL_P * u) + w

    affine = AffineDescriptor(
        a_x=[[a]],
        b_u=[[-(1.0 - a) * TCL_ETA * TCL_R * TCL_P]],
        c=[(1.0 - a) * TCL_THETA],
        g_w=[[1.0]],
    )
    dyn = Dynamics(state_dim=1, control_dim=1, disturbance_dim=1,
                   transition=transition, affine=affine)
    return TclModel(
        dynamics=dyn,
        safe_region=SafeRegion(lo=[19.0], hi=[22.0]),
        controls=ControlSet(controls=[[0.0], [1.0]]),
        horizon=18,
    )
