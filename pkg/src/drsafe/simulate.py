"""Monte-Carlo rollout of closed-loop trajectories.

Each trajectory owns a counter-based random stream keyed by (seed,
trajectory index), and its full disturbance block is drawn up front.  The
empirical results are therefore independent of evaluation order, chunking,
and thread count: trajectory i sees the same disturbances no matter how the
batch is partitioned.
"""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass

import numpy as np

from .ambiguity import NominalDistribution
from .errors import ConfigurationError
from .model import Dynamics, SafeRegion

log = logging.getLogger(__name__)

_U64 = (1 << 64) - 1


def trajectory_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one trajectory, stable across runs."""
    return np.random.Generator(np.random.Philox(key=[seed & _U64, index & _U64]))


def disturbance_block(nominal: NominalDistribution, seed: int, index: int,
                      horizon: int) -> np.ndarray:
    """The (horizon, l) disturbance sequence of trajectory `index`."""
    return nominal.sample_sequence(trajectory_stream(seed, index), horizon)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray        # (T+1, n)
    controls: np.ndarray      # (T,) control indices
    fallback_used: np.ndarray  # (T,) bool, True where the fallback branch fired
    disturbances: np.ndarray  # (T, l)
    safe: bool                # every visited state lay in the safe region
    first_exit: int           # first stage outside the region, or -1


def rollout(policy, dynamics: Dynamics, region: SafeRegion,
            nominal: NominalDistribution, x0, horizon: int,
            seed: int = 0, index: int = 0) -> Trajectory:
    """Simulate one closed-loop trajectory under ``policy.act``."""
    x = np.asarray(x0, dtype=float).reshape(dynamics.state_dim)
    w_block = disturbance_block(nominal, seed, index, horizon)
    states = np.empty((horizon + 1, dynamics.state_dim))
    controls = np.empty(horizon, dtype=int)
    fallback_used = np.empty(horizon, dtype=bool)
    states[0] = x
    for t in range(horizon):
        k, branch = policy.act(x, t)
        controls[t] = k
        fallback_used[t] = branch == "fallback"
        u = policy.control_set.controls[k]
        # Shared with the batch path so single and chunked simulation agree
        # bitwise, not just to rounding.
        x = _step_batch(dynamics, x[None, :], u[None, :], w_block[t][None, :])[0]
        states[t + 1] = x
    inside = region.contains(states)
    exits = np.flatnonzero(~inside)
    return Trajectory(states=states, controls=controls,
                      fallback_used=fallback_used, disturbances=w_block,
                      safe=bool(inside.all()),
                      first_exit=int(exits[0]) if exits.size else -1)


@dataclass(frozen=True)
class SimulationReport:
    samples: int
    horizon: int
    success_count: int
    success_rate: float
    state_quantiles: np.ndarray   # (T+1, n, 5): min, Q1, median, Q3, max
    fallback_fraction: np.ndarray  # (T,) share of trajectories on fallback
    exit_stages: np.ndarray       # (N,) first exit stage, -1 if never
    safe_mask: np.ndarray         # (N,) per-trajectory safety indicator
    states: np.ndarray            # (T+1, N, n) full state histories
    controls: np.ndarray          # (T, N) control indices applied
    fallback_used: np.ndarray     # (T, N) True where the fallback branch fired

    def summary(self) -> str:
        return (f"{self.success_count}/{self.samples} trajectories stayed safe "
                f"(rate {self.success_rate:.4f}) over {self.horizon} stages")


def _run_chunk(policy, dynamics, region, nominal, x0, horizon, seed,
               start: int, count: int):
    """Lockstep simulation of trajectories [start, start+count)."""
    n = dynamics.state_dim
    blocks = np.stack([disturbance_block(nominal, seed, start + i, horizon)
                       for i in range(count)])  # (count, T, l)
    states = np.broadcast_to(np.asarray(x0, dtype=float).reshape(n),
                             (count, n)).copy()
    history = np.empty((horizon + 1, count, n))
    history[0] = states
    inside = region.contains(states)
    exit_stage = np.where(inside, -1, 0)
    fallback = np.empty((horizon, count), dtype=bool)
    controls = np.empty((horizon, count), dtype=int)
    for t in range(horizon):
        ks, used_fb = policy.act_batch(states, t)
        fallback[t] = used_fb
        controls[t] = ks
        u_batch = policy.control_set.controls[ks]  # (count, m)
        w_batch = blocks[:, t, :]                  # (count, l)
        states = _step_batch(dynamics, states, u_batch, w_batch)
        history[t + 1] = states
        now_inside = region.contains(states)
        newly_out = inside & ~now_inside
        exit_stage[newly_out] = t + 1
        inside &= now_inside
    return history, fallback, controls, inside, exit_stage


def _step_batch(dynamics: Dynamics, states: np.ndarray, u_batch: np.ndarray,
                w_batch: np.ndarray) -> np.ndarray:
    if dynamics.affine is not None:
        aff = dynamics.affine
        return (states @ aff.a_x.T + u_batch @ aff.b_u.T
                + w_batch @ aff.g_w.T + aff.c)
    return np.stack([dynamics.step(x, u, w)
                     for x, u, w in zip(states, u_batch, w_batch)])


def monte_carlo(policy, dynamics: Dynamics, region: SafeRegion,
                nominal: NominalDistribution, x0, horizon: int,
                samples: int, seed: int = 0, chunk: int = 2048,
                threads: int = 1) -> SimulationReport:
    """Empirical safety probability of ``policy`` from ``x0``.

    A trajectory counts as safe when all of x_0..x_T lie in the region.
    """
    if samples <= 0:
        raise ConfigurationError("samples must be positive")
    if horizon < 0:
        raise ConfigurationError("horizon must be nonnegative")
    starts = list(range(0, samples, chunk))
    jobs = [(s, min(chunk, samples - s)) for s in starts]

    def run(job):
        return _run_chunk(policy, dynamics, region, nominal, x0, horizon,
                          seed, job[0], job[1])

    if threads > 1 and len(jobs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    history = np.concatenate([r[0] for r in results], axis=1)  # (T+1, N, n)
    fallback = np.concatenate([r[1] for r in results], axis=1)  # (T, N)
    controls = np.concatenate([r[2] for r in results], axis=1)  # (T, N)
    safe_mask = np.concatenate([r[3] for r in results])
    exit_stages = np.concatenate([r[4] for r in results])
    quantiles = np.quantile(history, [0.0, 0.25, 0.5, 0.75, 1.0], axis=1)
    # (5, T+1, n) -> (T+1, n, 5)
    quantiles = np.moveaxis(quantiles, 0, -1)
    success = int(safe_mask.sum())
    fb_share = (fallback.mean(axis=1) if horizon > 0
                else np.zeros(0))
    report = SimulationReport(samples=samples, horizon=horizon,
                              success_count=success,
                              success_rate=success / samples,
                              state_quantiles=quantiles,
                              fallback_fraction=fb_share,
                              exit_stages=exit_stages, safe_mask=safe_mask,
                              states=history, controls=controls,
                              fallback_used=fallback)
    log.info("%s", report.summary())
    return report
