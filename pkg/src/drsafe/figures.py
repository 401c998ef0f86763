"""Figure rendering for the CLI report paths.

Every helper takes an output path, draws onto an Agg canvas, and writes the
PNG atomically (temp file + rename) so partially written images never
appear.  Helpers return the path on success, or None when the state
dimension cannot be rendered (figures cover the 1-D benchmark; CSV output
is the full-fidelity contract for higher dimensions).
"""

from __future__ import annotations

import logging
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

_DPI = 150


def _atomic_save(fig, path: str) -> str:
    tmp = f"{path}.tmp"
    fig.savefig(tmp, format="png", dpi=_DPI)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def _skip(path, dim) -> None:
    log.info("skipping figure %s: only 1-D state spaces are rendered (n=%d)",
             path, dim)
    plt.close("all")
    return None


def value_curves(path: str, grid, values, region=None):
    """All stage value curves v_t(x) on one axis, colored by stage."""
    if grid.dim != 1:
        return _skip(path, grid.dim)
    xs = grid.coords(0)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    cmap = plt.get_cmap("viridis")
    top = max(len(values) - 1, 1)
    for vf in values:
        ax.plot(xs, vf.values, color=cmap(vf.stage / top), lw=1.2)
    sm = plt.cm.ScalarMappable(cmap=cmap,
                               norm=plt.Normalize(vmin=0, vmax=top))
    fig.colorbar(sm, ax=ax, label="stage t")
    if region is not None:
        ax.axvline(float(region.lo[0]), color="0.4", ls="--", lw=0.8)
        ax.axvline(float(region.hi[0]), color="0.4", ls="--", lw=0.8)
    ax.set_xlabel("state x")
    ax.set_ylabel("worst-case probability of safety")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    return _atomic_save(fig, path)


def sweep_curves(path: str, xs, labeled_curves, parameter: str):
    """v_0 curves for each swept parameter value (list of (value, y))."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for value, ys in labeled_curves:
        ax.plot(xs, ys, lw=1.4, label=f"{parameter} = {value:g}")
    ax.set_xlabel("initial state x")
    ax.set_ylabel("probability of safety")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    return _atomic_save(fig, path)


def audit_gaps(path: str, atom_counts, gap_rows):
    """Duality-gap convergence: one faint line per audited point plus the
    maximum envelope, against the atom count (log x)."""
    gaps = np.asarray(gap_rows, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for row in gaps:
        ax.plot(atom_counts, np.abs(row), color="steelblue", alpha=0.25, lw=0.8)
    if gaps.size:
        ax.plot(atom_counts, np.abs(gaps).max(axis=0), color="crimson", lw=2,
                label="max |gap|")
        ax.legend()
    ax.set_xscale("log")
    if gaps.size and np.abs(gaps).max() > 0:
        ax.set_yscale("log")
    ax.set_xlabel("primal atoms per dimension")
    ax.set_ylabel("|dual - primal|")
    fig.tight_layout()
    return _atomic_save(fig, path)


def simulation_boxplots(path: str, reports: dict):
    """Per-stage Tukey-style boxes of the first state coordinate, one panel
    per labeled report (whiskers at min/max, no fliers)."""
    labels = list(reports)
    fig, axes = plt.subplots(1, len(labels), figsize=(6 * len(labels), 4.5),
                             squeeze=False, sharey=True)
    for ax, label in zip(axes[0], labels):
        rep = reports[label]
        stats = []
        for t in range(rep.horizon + 1):
            q = rep.state_quantiles[t, 0]
            stats.append({"whislo": q[0], "q1": q[1], "med": q[2],
                          "q3": q[3], "whishi": q[4], "fliers": []})
        ax.bxp(stats, positions=list(range(rep.horizon + 1)))
        ax.set_title(f"{label}: safety rate {rep.success_rate:.4f}")
        ax.set_xlabel("stage t")
    axes[0][0].set_ylabel("state x")
    fig.tight_layout()
    return _atomic_save(fig, path)


def safeset_bands(path: str, family):
    """Stage-by-stage membership bands of a 1-D safe-set family."""
    if family.grid.dim != 1:
        return _skip(path, family.grid.dim)
    xs = family.grid.coords(0)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    horizon = family.horizon
    ax.imshow(family.masks.astype(float), aspect="auto", origin="lower",
              interpolation="none", cmap="Greens",
              extent=(xs[0], xs[-1], -0.5, horizon + 0.5))
    ax.set_xlabel("state x")
    ax.set_ylabel("stage t")
    ax.set_title(f"safe sets at alpha = {family.alpha:g}")
    fig.tight_layout()
    return _atomic_save(fig, path)
