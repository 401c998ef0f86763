"""Command-line interface.

Subcommands: solve, sweep, audit, simulate, safeset.  Every command reads
one INI config (see config module and README), writes plain CSV artifacts
plus rendered figures into the output directory, and is deterministic for a
fixed (config, seed): files are written atomically and byte-identical
across reruns and thread counts.

Value recursions are cached as .npz keyed by a hash of everything the
recursion depends on; DRSAFE_CACHE_DIR overrides the cache location
(default: <out>/cache).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import os
import sys
from typing import Optional

import numpy as np

from . import figures
from .bellman import RecursionResult, StateGrid, ValueFunction, solve_recursion
from .config import RunConfig, load_config
from .dual_sip import dual_inner_value, payoff_from_value_function, verify_certificate
from .errors import ConfigurationError, DrsafeError
from .oracle import primal_value
from .policy import SafetyOrientedController, threshold
from .simulate import monte_carlo

log = logging.getLogger(__name__)

AUDIT_ATOM_COUNTS = (65, 257, 1025, 4097)
WEAK_DUALITY_SLACK = 1e-6


# ---------------------------------------------------------------------------
# CSV + cache plumbing


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _write_csv(path: str, header, rows) -> str:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    os.replace(tmp, path)
    return path


def _cache_dir(out_dir: str) -> str:
    path = os.environ.get("DRSAFE_CACHE_DIR") or os.path.join(out_dir, "cache")
    os.makedirs(path, exist_ok=True)
    return path


def _solve_cached(cfg: RunConfig, mode: str, grid: StateGrid, threads: int,
                  out_dir: str) -> RecursionResult:
    """Run (or load) the value recursion for one mode ('robust'/'nominal')."""
    key = cfg.solve_hash(mode)
    path = os.path.join(_cache_dir(out_dir), f"solve-{key}.npz")
    if os.path.exists(path):
        log.info("cache hit %s (%s mode); skipping recomputation", key, mode)
        with np.load(path) as data:
            values = tuple(
                ValueFunction(stage=t, grid=grid, region=cfg.region,
                              values=data["values"][t])
                for t in range(data["values"].shape[0]))
            policies = tuple(data["policies"][t].astype(int)
                             for t in range(data["policies"].shape[0]))
        return RecursionResult(values=values, policies=policies, mode=mode)

    log.info("cache miss %s (%s mode); solving", key, mode)
    opts = dataclasses.replace(cfg.solver, threads=threads)
    if mode == "robust":
        result = solve_recursion(cfg.dynamics, cfg.region, cfg.control_set,
                                 cfg.horizon, grid,
                                 ambiguity=cfg.ambiguity_schedule(), opts=opts)
    else:
        result = solve_recursion(cfg.dynamics, cfg.region, cfg.control_set,
                                 cfg.horizon, grid,
                                 nominal=cfg.build_nominal(), opts=opts)
    values = np.stack([vf.values for vf in result.values])
    if result.policies:
        policies = np.stack(result.policies)
    else:
        policies = np.zeros((0,) + grid.shape, dtype=int)
    tmp = f"{path}.tmp.npz"
    np.savez_compressed(tmp, values=values, policies=policies)
    os.replace(tmp, path)
    return result


def _modes(cfg: RunConfig) -> list:
    return ["robust", "nominal"] if cfg.mode == "compare" else [cfg.mode]


def _value_rows(grid: StateGrid, cfg: RunConfig, vf: ValueFunction,
                policy: Optional[np.ndarray]):
    pts = grid.node_points()
    vals = vf.values.ravel()
    pol = None if policy is None else policy.ravel()
    m = cfg.control_set.controls.shape[1]
    for i in range(pts.shape[0]):
        row = list(pts[i]) + [vf.stage, vals[i]]
        if pol is None:
            row += [-1] + [None] * m
        else:
            k = int(pol[i])
            row += [k] + list(cfg.control_set.controls[k])
        yield row


def _write_value_tables(cfg: RunConfig, grid: StateGrid, result: RecursionResult,
                        out_dir: str, prefix: str = "v") -> list:
    n = grid.dim
    m = cfg.control_set.controls.shape[1]
    header = ([f"x{d}" for d in range(n)] + ["t", "value", "policy"]
              + [f"u{j}" for j in range(m)])
    paths = []
    for t, vf in enumerate(result.values):
        policy = result.policies[t] if t < len(result.policies) else None
        path = os.path.join(out_dir, f"{prefix}_{t:03d}.csv")
        paths.append(_write_csv(path, header, _value_rows(grid, cfg, vf, policy)))
    return paths


# ---------------------------------------------------------------------------
# Commands


def cmd_solve(cfg: RunConfig, out_dir: str, threads: int) -> int:
    grid = cfg.build_grid()
    for mode in _modes(cfg):
        result = _solve_cached(cfg, mode, grid, threads, out_dir)
        prefix = "v" if mode == _modes(cfg)[0] else "v_nominal"
        _write_value_tables(cfg, grid, result, out_dir, prefix=prefix)
        fig_name = ("value_curves.png" if mode == _modes(cfg)[0]
                    else "value_curves_nominal.png")
        figures.value_curves(os.path.join(out_dir, fig_name), grid,
                             result.values, cfg.region)
        log.info("%s mode: wrote %d value tables", mode, len(result.values))
    return 0


def _sweep_pairs(cfg: RunConfig):
    bs = list(cfg.sweep_b) if cfg.sweep_b else [None]
    cs = list(cfg.sweep_c) if cfg.sweep_c else [None]
    return list(itertools.product(bs, cs))


def _sweep_config(cfg: RunConfig, b, c) -> RunConfig:
    l = cfg.dynamics.disturbance_dim
    base = dict(cfg.ambiguity_base)
    overrides = cfg.ambiguity_overrides
    if b is not None:
        base["mean_tol"] = np.full(l, float(b))
    if c is not None:
        base["scale"] = float(c)
    if b is not None or c is not None:
        swept = {"mean_tol"} if b is not None else set()
        if c is not None:
            swept.add("scale")
        overrides = {t: {k: v for k, v in od.items() if k not in swept}
                     for t, od in cfg.ambiguity_overrides.items()}
    return dataclasses.replace(cfg, ambiguity_base=base,
                               ambiguity_overrides=overrides)


def cmd_sweep(cfg: RunConfig, out_dir: str, threads: int) -> int:
    if not cfg.sweep_b and not cfg.sweep_c:
        raise ConfigurationError("[sweep]: need at least one of b, c lists")
    grid = cfg.build_grid()
    pts = grid.node_points()
    n = grid.dim
    header = ["b", "c"] + [f"x{d}" for d in range(n)] + ["v0"]
    rows = []
    failures = []
    curves = {}
    for b, c in _sweep_pairs(cfg):
        sub = _sweep_config(cfg, b, c)
        b_out = float(np.max(np.asarray(sub.ambiguity_base["mean_tol"])))
        c_out = float(sub.ambiguity_base["scale"])
        try:
            result = _solve_cached(sub, "robust", grid, threads, out_dir)
        except DrsafeError as exc:
            log.error("sweep pair b=%g c=%g failed: %s", b_out, c_out, exc)
            failures.append((b_out, c_out, str(exc)))
            continue
        v0 = result.values[0].values.ravel()
        curves[(b_out, c_out)] = v0
        for i in range(pts.shape[0]):
            rows.append([b_out, c_out] + list(pts[i]) + [v0[i]])
    _write_csv(os.path.join(out_dir, "sweep.csv"), header, rows)
    _write_csv(os.path.join(out_dir, "sweep_failures.csv"),
               ["b", "c", "error"], failures)
    if n == 1 and curves:
        xs = grid.coords(0)
        all_b = sorted({bc[0] for bc in curves})
        all_c = sorted({bc[1] for bc in curves})
        c_ref, b_ref = all_c[0], all_b[-1]
        b_family = [(b, curves[(b, c_ref)]) for b in all_b if (b, c_ref) in curves]
        c_family = [(c, curves[(b_ref, c)]) for c in all_c if (b_ref, c) in curves]
        if len(b_family) > 1:
            figures.sweep_curves(os.path.join(out_dir, "sweep_b.png"), xs,
                                 b_family, "b")
        if len(c_family) > 1:
            figures.sweep_curves(os.path.join(out_dir, "sweep_c.png"), xs,
                                 c_family, "c")
    log.info("sweep: %d pairs solved, %d failed", len(curves), len(failures))
    return 0


def cmd_audit(cfg: RunConfig, out_dir: str, threads: int, samples: int,
              seed: int) -> int:
    if cfg.horizon < 1:
        raise ConfigurationError("audit requires horizon >= 1")
    grid = cfg.build_grid()
    result = _solve_cached(cfg, "robust", grid, threads, out_dir)
    pts = grid.node_points()
    inside_idx = np.flatnonzero(cfg.region.contains(pts))
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xD7A1]))
    n = grid.dim
    header = (["id", "t"] + [f"x{d}" for d in range(n)] + ["u", "dual_value",
              "converged", "iterations", "residual"]
              + [f"primal_{k}" for k in AUDIT_ATOM_COUNTS]
              + ["gap", "weak_violation"])
    rows = []
    gap_rows = []
    weak_violations = 0
    opts = dataclasses.replace(cfg.solver, threads=1)
    for i in range(samples):
        t = int(rng.integers(0, cfg.horizon))
        x = pts[inside_idx[int(rng.integers(0, inside_idx.size))]]
        k = int(rng.integers(0, cfg.control_set.count))
        u = cfg.control_set.controls[k]
        amb = cfg.ambiguity_at(t)
        v_next = result.values[t + 1]
        value, cert = dual_inner_value(x, u, v_next, cfg.dynamics, amb, opts)
        payoff = payoff_from_value_function(v_next, cfg.dynamics, x, u,
                                            amb.support_lo, amb.support_hi)
        residual = verify_certificate(cert, payoff, amb, opts)

        def point_payoff(wb):
            return v_next.evaluate(cfg.dynamics.step_w_batch(x, u, wb))

        primals = [primal_value(amb, point_payoff, atoms_per_dim=count)[0]
                   for count in AUDIT_ATOM_COUNTS]
        gaps = [value - p for p in primals]
        weak = any(g > WEAK_DUALITY_SLACK for g in gaps)
        weak_violations += int(weak)
        gap_rows.append(gaps)
        rows.append([i, t] + list(x) + [k, value, cert.converged,
                     cert.iterations, residual] + primals
                    + [gaps[-1], weak])
    _write_csv(os.path.join(out_dir, "audit.csv"), header, rows)
    figures.audit_gaps(os.path.join(out_dir, "audit_gaps.png"),
                       AUDIT_ATOM_COUNTS, gap_rows)
    max_gap = max((abs(g[-1]) for g in gap_rows), default=0.0)
    log.info("audit: %d samples, max |gap| at %d atoms = %.3g, "
             "weak-duality violations = %d (must be 0)",
             samples, AUDIT_ATOM_COUNTS[-1], max_gap, weak_violations)
    return 0


def _build_controller(cfg: RunConfig, result: RecursionResult,
                      alpha: float) -> SafetyOrientedController:
    family = threshold(result.values, alpha)
    if result.policies:
        policies = np.stack(result.policies)
    else:
        policies = np.zeros((0,) + result.values[0].grid.shape, dtype=int)
    supports = tuple(
        (amb.support_lo, amb.support_hi)
        for amb in cfg.ambiguity_schedule(check=False))
    return SafetyOrientedController(
        safe_sets=family, policies=policies, dynamics=cfg.dynamics,
        control_set=cfg.control_set, supports=supports, fallback=cfg.fallback)


def _check_truth_support(cfg: RunConfig):
    truth = cfg.build_truth()
    lo = np.atleast_1d(np.asarray(truth.lo, dtype=float))
    hi = np.atleast_1d(np.asarray(truth.hi, dtype=float))
    for t, amb in enumerate(cfg.ambiguity_schedule(check=False)):
        if np.any(lo < amb.support_lo - 1e-12) or np.any(hi > amb.support_hi + 1e-12):
            log.warning("true distribution support exceeds stage-%d ambiguity "
                        "support; continuing anyway", t)
    return truth


def cmd_simulate(cfg: RunConfig, out_dir: str, threads: int, seed: int,
                 alpha: float) -> int:
    if cfg.x0 is None:
        raise ConfigurationError("[simulate] x0: required")
    grid = cfg.build_grid()
    truth = _check_truth_support(cfg)
    n = grid.dim
    reports = {}
    summary_rows = []
    for mode in _modes(cfg):
        result = _solve_cached(cfg, mode, grid, threads, out_dir)
        controller = _build_controller(cfg, result, alpha)
        report = monte_carlo(controller, cfg.dynamics, cfg.region, truth,
                             cfg.x0, cfg.horizon, cfg.samples, seed=seed,
                             chunk=cfg.chunk, threads=threads)
        reports[mode] = report

        _write_csv(os.path.join(out_dir, f"report_{mode}.csv"),
                   ["samples", "safe_count", "safety_rate", "seed", "alpha"]
                   + [f"x0_{d}" for d in range(n)],
                   [[report.samples, report.success_count, report.success_rate,
                     seed, alpha] + list(cfg.x0)])
        _write_csv(os.path.join(out_dir, f"quantiles_{mode}.csv"),
                   ["t", "dim", "min", "q1", "median", "q3", "max"],
                   ([t, d] + list(report.state_quantiles[t, d])
                    for t in range(cfg.horizon + 1) for d in range(n)))
        _write_csv(os.path.join(out_dir, f"trajectories_{mode}.csv"),
                   ["sample", "t"] + [f"x{d}" for d in range(n)] + ["u", "branch"],
                   _trajectory_rows(report, cfg.horizon, n))
        summary_rows.append([mode, report.samples, report.success_count,
                             report.success_rate])
        log.info("%s controller: %s", mode, report.summary())
    _write_csv(os.path.join(out_dir, "summary.csv"),
               ["mode", "samples", "safe_count", "safety_rate"], summary_rows)
    figures.simulation_boxplots(os.path.join(out_dir, "boxplots.png"), reports)
    return 0


def _trajectory_rows(report, horizon: int, n: int):
    for s in range(report.samples):
        for t in range(horizon):
            yield ([s, t] + list(report.states[t, s])
                   + [int(report.controls[t, s]),
                      "fallback" if report.fallback_used[t, s] else "policy"])
        yield [s, horizon] + list(report.states[horizon, s]) + [None, None]


def cmd_safeset(cfg: RunConfig, out_dir: str, threads: int, alpha: float) -> int:
    grid = cfg.build_grid()
    pts = grid.node_points()
    n = grid.dim
    for mode in _modes(cfg):
        result = _solve_cached(cfg, mode, grid, threads, out_dir)
        family = threshold(result.values, alpha)
        suffix = "" if mode == _modes(cfg)[0] else "_nominal"
        rows = []
        for t in range(family.horizon + 1):
            mask = family.masks[t].ravel()
            for i in range(pts.shape[0]):
                rows.append([t] + list(pts[i]) + [bool(mask[i])])
        _write_csv(os.path.join(out_dir, f"safeset{suffix}.csv"),
                   ["t"] + [f"x{d}" for d in range(n)] + ["member"], rows)
        figures.safeset_bands(os.path.join(out_dir, f"safeset{suffix}.png"),
                              family)
        counts = family.counts()
        log.info("%s mode: safe-set node counts per stage %s", mode,
                 ",".join(str(int(c)) for c in counts))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", required=True, help="path to the INI config")
    sub.add_argument("--out", default=None,
                     help="output directory (default: [output] dir)")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads for backups and rollouts")
    sub.add_argument("--seed", type=int, default=None,
                     help="override [simulate] seed")
    sub.add_argument("--alpha", type=float, default=None,
                     help="override [threshold] alpha")
    sub.add_argument("--mode", choices=["robust", "nominal", "compare"],
                     default=None, help="override [mode] mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drsafe",
        description="Distributionally robust safe sets, policies, and "
                    "closed-loop validation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("solve", "compute value functions and policy tables"),
            ("sweep", "solve across ambiguity-parameter lists"),
            ("audit", "compare dual values against the primal oracle"),
            ("simulate", "Monte-Carlo closed-loop safety evaluation"),
            ("safeset", "threshold value functions into safe sets")):
        cmd = sub.add_parser(name, help=helptext)
        _add_common(cmd)
        if name == "audit":
            cmd.add_argument("--samples", type=int, default=50,
                             help="number of audited (t, x, u) triples")
    return parser


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.mode is not None:
            cfg = dataclasses.replace(cfg, mode=args.mode)
        alpha = cfg.alpha if args.alpha is None else args.alpha
        if not (0.0 < alpha <= 1.0):
            raise ConfigurationError(f"--alpha must be in (0, 1], got {alpha}")
        seed = cfg.seed if args.seed is None else args.seed
        threads = max(1, args.threads)
        out_dir = args.out or cfg.out_dir
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "solve":
            return cmd_solve(cfg, out_dir, threads)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, threads)
        if args.command == "audit":
            return cmd_audit(cfg, out_dir, threads, args.samples, seed)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir, threads, seed, alpha)
        if args.command == "safeset":
            return cmd_safeset(cfg, out_dir, threads, alpha)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except DrsafeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
