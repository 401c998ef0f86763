"""Run configuration: a flat INI file mapped onto the library objects.

Grammar (all sections optional unless noted; see README for a walkthrough):

    [model]     preset = tcl | explicit matrices a_x/b_u/offset/g_w,
                controls (one vector per ';'-separated row), safe_lo/safe_hi,
                horizon
    [grid]      lo, hi (vectors), nodes (per-dimension counts)
    [ambiguity] support_lo, support_hi, mean, mean_tol, second_moment, scale
    [ambiguity.stage.N]  any subset of the ambiguity keys, overriding stage N
    [mode]      mode = robust | nominal | compare
    [nominal]   kind = uniform | truncated-normal | atoms, mean, std, lo,
                hi, points, weights
    [threshold] alpha
    [sweep]     b = comma list, c = comma list
    [simulate]  truth_kind/truth_* (same keys as [nominal]), x0, samples,
                seed, fallback, chunk
    [solver]    feas_tol, max_iterations, scan_points, prune_slack,
                verify_factor, lp_tol, nominal_atoms
    [output]    dir

Unknown sections or keys are rejected so typos fail loudly.  The TCL preset
fills every field with the benchmark's published values; any key given in
the file overrides the preset.  Note the benchmark's published disturbance
parameters are mutually inconsistent (a uniform distribution on the stated
support cannot have the stated variance); the preset ships the literal
values and leaves reconciliation to the user via the independent
support/ambiguity/simulation entries.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ambiguity import MomentAmbiguitySet, NominalDistribution
from .bellman import StateGrid, build_grid
from .dual_sip import SolverOptions
from .errors import ConfigurationError
from .model import ControlSet, Dynamics, SafeRegion, tcl_preset

TCL_SIGMA = 0.0625  # 0.25**2
# Support half-width exactly as published for the benchmark: (1/2)*sqrt(Sigma/12).
TCL_SUPPORT_HALF_WIDTH = 0.5 * math.sqrt(TCL_SIGMA / 12.0)
TCL_MEAN_TOL = 0.1
TCL_TRUNCNORM_STD = math.sqrt(TCL_SIGMA / 2.0)

_KNOWN_SECTIONS = {"model", "grid", "ambiguity", "mode", "nominal",
                   "threshold", "sweep", "simulate", "solver", "output"}
_KNOWN_KEYS = {
    "model": {"preset", "a_x", "b_u", "offset", "g_w", "controls",
              "safe_lo", "safe_hi", "horizon"},
    "grid": {"lo", "hi", "nodes"},
    "ambiguity": {"support_lo", "support_hi", "mean", "mean_tol",
                  "second_moment", "scale"},
    "mode": {"mode"},
    "nominal": {"kind", "mean", "std", "lo", "hi", "points", "weights"},
    "threshold": {"alpha"},
    "sweep": {"b", "c"},
    "simulate": {"truth_kind", "truth_mean", "truth_std", "truth_lo",
                 "truth_hi", "truth_points", "truth_weights",
                 "x0", "samples", "seed", "fallback", "chunk"},
    "solver": {"feas_tol", "max_iterations", "scan_points", "prune_slack",
               "verify_factor", "lp_tol", "nominal_atoms"},
    "output": {"dir"},
}


def _err(section: str, key: str, message: str) -> ConfigurationError:
    return ConfigurationError(f"[{section}] {key}: {message}")


def _parse_float(section, key, raw) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise _err(section, key, f"expected a number, got {raw!r}") from None


def _parse_int(section, key, raw) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise _err(section, key, f"expected an integer, got {raw!r}") from None


def _parse_vector(section, key, raw) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in str(raw).split(",") if tok.strip()])
    except ValueError:
        raise _err(section, key,
                   f"expected a comma-separated vector, got {raw!r}") from None


def _parse_matrix(section, key, raw) -> np.ndarray:
    rows = [r for r in str(raw).split(";") if r.strip()]
    parsed = [_parse_vector(section, key, r) for r in rows]
    widths = {p.size for p in parsed}
    if len(widths) != 1:
        raise _err(section, key, "rows have inconsistent lengths")
    return np.array(parsed)


@dataclass
class RunConfig:
    """Fully resolved run description (preset defaults + file overrides)."""

    dynamics: Dynamics
    region: SafeRegion
    control_set: ControlSet
    horizon: int
    grid_lo: np.ndarray
    grid_hi: np.ndarray
    grid_nodes: np.ndarray
    ambiguity_base: dict            # shared ambiguity keyword dict
    ambiguity_overrides: dict       # stage -> partial keyword dict
    mode: str                       # robust | nominal | compare
    nominal_spec: dict              # keyword dict for NominalDistribution
    alpha: float
    sweep_b: list
    sweep_c: list
    truth_spec: dict
    x0: np.ndarray
    samples: int
    seed: int
    fallback: int
    chunk: int
    solver: SolverOptions
    out_dir: str

    # -- object builders -------------------------------------------------
    def build_grid(self) -> StateGrid:
        support_lo, support_hi = self._support_bounds()
        return build_grid(self.grid_lo, self.grid_hi, self.grid_nodes,
                          self.region, dynamics=self.dynamics,
                          control_set=self.control_set,
                          support_lo=support_lo, support_hi=support_hi)

    def _support_bounds(self):
        """Widest per-stage support, for the reachable-envelope check."""
        lo = np.array(self.ambiguity_base["support_lo"], dtype=float, ndmin=1)
        hi = np.array(self.ambiguity_base["support_hi"], dtype=float, ndmin=1)
        for over in self.ambiguity_overrides.values():
            if "support_lo" in over:
                lo = np.minimum(lo, np.array(over["support_lo"], ndmin=1))
            if "support_hi" in over:
                hi = np.maximum(hi, np.array(over["support_hi"], ndmin=1))
        return lo, hi

    def ambiguity_at(self, stage: int, check: bool = True) -> MomentAmbiguitySet:
        kw = dict(self.ambiguity_base)
        kw.update(self.ambiguity_overrides.get(stage, {}))
        return MomentAmbiguitySet(check=check, **kw)

    def ambiguity_schedule(self, check: bool = True) -> list:
        return [self.ambiguity_at(t, check=check) for t in range(self.horizon)]

    def build_nominal(self) -> NominalDistribution:
        return NominalDistribution(**self.nominal_spec)

    def build_truth(self) -> NominalDistribution:
        return NominalDistribution(**self.truth_spec)

    # -- hashing ----------------------------------------------------------
    def solve_signature(self, mode: Optional[str] = None) -> str:
        """Canonical text of everything the value recursion depends on."""
        mode = mode or self.mode
        buf = io.StringIO()

        def put(label, value):
            if isinstance(value, np.ndarray):
                flat = ",".join("%.17g" % v for v in np.asarray(value, float).ravel())
                buf.write(f"{label}={flat};{value.shape}\n")
            elif isinstance(value, float):
                buf.write(f"{label}={'%.17g' % value}\n")
            else:
                buf.write(f"{label}={value}\n")

        aff = self.dynamics.affine
        if aff is not None:
            put("a_x", aff.a_x)
            put("b_u", aff.b_u)
            put("offset", aff.c)
            put("g_w", aff.g_w)
        else:
            put("transition", repr(self.dynamics.transition))
        put("safe_lo", self.region.lo)
        put("safe_hi", self.region.hi)
        put("controls", self.control_set.controls)
        put("horizon", self.horizon)
        put("grid_lo", self.grid_lo)
        put("grid_hi", self.grid_hi)
        put("grid_nodes", self.grid_nodes)
        for label in sorted(self.ambiguity_base):
            put(f"amb.{label}", self.ambiguity_base[label])
        for stage in sorted(self.ambiguity_overrides):
            for label in sorted(self.ambiguity_overrides[stage]):
                put(f"amb.stage{stage}.{label}",
                    self.ambiguity_overrides[stage][label])
        put("mode", mode)
        if mode == "nominal":
            for label in sorted(self.nominal_spec):
                put(f"nominal.{label}", self.nominal_spec[label])
        opts = self.solver
        for label in ("feas_tol", "max_iterations", "scan_points",
                      "prune_slack", "verify_factor", "lp_tol",
                      "nominal_atoms"):
            put(f"solver.{label}", getattr(opts, label))
        return buf.getvalue()

    def solve_hash(self, mode: Optional[str] = None) -> str:
        text = self.solve_signature(mode)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _tcl_defaults() -> dict:
    """Benchmark values as published, used wherever the file is silent."""
    k = TCL_SUPPORT_HALF_WIDTH
    return {
        "ambiguity": {
            "support_lo": np.array([-k]),
            "support_hi": np.array([k]),
            "mean": np.array([0.0]),
            "mean_tol": np.array([TCL_MEAN_TOL]),
            "second_moment": np.array([[TCL_SIGMA]]),
            "scale": 1.0,
        },
        "nominal": {
            "kind": "truncated-normal",
            "lo": np.array([-k]),
            "hi": np.array([k]),
            "mean": np.array([0.0]),
            "std": np.array([TCL_TRUNCNORM_STD]),
        },
        "truth": {
            "kind": "uniform",
            "lo": np.array([-k]),
            "hi": np.array([k]),
        },
        "grid": (np.array([18.0]), np.array([23.0]), np.array([601])),
        "alpha": 0.95,
        "x0": np.array([21.0]),
        "samples": 10000,
    }


def _read_ini(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config file {path}: {exc}") from exc
    return parser


def _validate_sections(parser: configparser.ConfigParser):
    for section in parser.sections():
        base = section
        if section.startswith("ambiguity.stage."):
            base = "ambiguity"
            suffix = section[len("ambiguity.stage."):]
            if not suffix.isdigit():
                raise ConfigurationError(
                    f"[{section}]: stage suffix must be a nonnegative integer")
        elif section not in _KNOWN_SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[base]:
                raise _err(section, key, "unknown key")


def _ambiguity_kwargs(parser, section: str, dim_hint: int) -> dict:
    out = {}
    sec = parser[section]
    for key in ("support_lo", "support_hi", "mean", "mean_tol"):
        if key in sec:
            out[key] = _parse_vector(section, key, sec[key])
    if "second_moment" in sec:
        mat = _parse_matrix(section, "second_moment", sec["second_moment"])
        if mat.shape == (1, dim_hint):  # allow a bare diagonal row
            mat = np.diag(mat[0]) if dim_hint > 1 else mat
        out["second_moment"] = mat
    if "scale" in sec:
        out["scale"] = _parse_float(section, "scale", sec["scale"])
    return out


def _distribution_kwargs(parser, section: str, prefix: str = "") -> dict:
    sec = parser[section]
    out = {}
    name = prefix + "kind"
    if name in sec:
        out["kind"] = sec[name].strip()
    for key in ("mean", "std", "lo", "hi"):
        name = prefix + key
        if name in sec:
            out[key] = _parse_vector(section, name, sec[name])
    name = prefix + "points"
    if name in sec:
        out["points"] = _parse_matrix(section, name, sec[name])
    name = prefix + "weights"
    if name in sec:
        out["weights"] = _parse_vector(section, name, sec[name])
    return out


def load_config(path: str) -> RunConfig:
    """Parse, validate, and resolve a config file against the TCL preset."""
    parser = _read_ini(path)
    _validate_sections(parser)

    preset_name = parser.get("model", "preset", fallback=None)
    if preset_name is not None and preset_name.strip() != "tcl":
        raise _err("model", "preset", f"unknown preset {preset_name.strip()!r}")
    explicit = parser.has_option("model", "a_x")
    if preset_name is not None and explicit:
        raise _err("model", "preset", "give either a preset or explicit matrices")
    if explicit:
        dynamics, region, control_set = _explicit_model(parser)
        horizon = None
        defaults = None
    else:
        tcl = tcl_preset()
        dynamics, region, control_set = tcl.dynamics, tcl.safe_region, tcl.controls
        horizon = tcl.horizon
        defaults = _tcl_defaults()

    if parser.has_option("model", "horizon"):
        horizon = _parse_int("model", "horizon", parser["model"]["horizon"])
    if horizon is None:
        raise ConfigurationError("[model] horizon: required for explicit models")
    if horizon < 0:
        raise _err("model", "horizon", "must be nonnegative")

    n, l = dynamics.state_dim, dynamics.disturbance_dim

    # grid
    if defaults is not None:
        grid_lo, grid_hi, grid_nodes = defaults["grid"]
    else:
        grid_lo = grid_hi = grid_nodes = None
    if parser.has_section("grid"):
        sec = parser["grid"]
        if "lo" in sec:
            grid_lo = _parse_vector("grid", "lo", sec["lo"])
        if "hi" in sec:
            grid_hi = _parse_vector("grid", "hi", sec["hi"])
        if "nodes" in sec:
            grid_nodes = _parse_vector("grid", "nodes", sec["nodes"]).astype(int)
    for label, value in (("lo", grid_lo), ("hi", grid_hi), ("nodes", grid_nodes)):
        if value is None:
            raise _err("grid", label, "required for explicit models")

    # ambiguity
    amb_base = dict(defaults["ambiguity"]) if defaults else {}
    if parser.has_section("ambiguity"):
        amb_base.update(_ambiguity_kwargs(parser, "ambiguity", l))
    for key in ("support_lo", "support_hi", "mean", "mean_tol", "second_moment"):
        if key not in amb_base:
            raise _err("ambiguity", key, "required for explicit models")
    amb_base.setdefault("scale", 1.0)
    overrides = {}
    for section in parser.sections():
        if section.startswith("ambiguity.stage."):
            stage = int(section[len("ambiguity.stage."):])
            if stage >= horizon:
                raise ConfigurationError(
                    f"[{section}]: stage {stage} outside horizon {horizon}")
            overrides[stage] = _ambiguity_kwargs(parser, section, l)

    # mode
    mode = parser.get("mode", "mode", fallback="robust").strip()
    if mode not in ("robust", "nominal", "compare"):
        raise _err("mode", "mode", f"must be robust, nominal, or compare, got {mode!r}")

    # nominal estimate
    nominal_spec = dict(defaults["nominal"]) if defaults else {}
    if parser.has_section("nominal"):
        nominal_spec.update(_distribution_kwargs(parser, "nominal"))
    if mode in ("nominal", "compare") and "kind" not in nominal_spec:
        raise _err("nominal", "kind", "required when mode is nominal or compare")
    if nominal_spec and "lo" not in nominal_spec:
        nominal_spec["lo"] = np.array(amb_base["support_lo"], dtype=float)
        nominal_spec["hi"] = np.array(amb_base["support_hi"], dtype=float)

    # threshold
    alpha = defaults["alpha"] if defaults else 0.95
    if parser.has_option("threshold", "alpha"):
        alpha = _parse_float("threshold", "alpha", parser["threshold"]["alpha"])
    if not (0.0 < alpha <= 1.0):
        raise _err("threshold", "alpha", f"must be in (0, 1], got {alpha}")

    # sweeps
    sweep_b, sweep_c = [], []
    if parser.has_section("sweep"):
        sec = parser["sweep"]
        if "b" in sec:
            sweep_b = list(_parse_vector("sweep", "b", sec["b"]))
        if "c" in sec:
            sweep_c = list(_parse_vector("sweep", "c", sec["c"]))

    # simulation
    truth_spec = dict(defaults["truth"]) if defaults else {}
    x0 = defaults["x0"] if defaults else None
    samples = defaults["samples"] if defaults else 10000
    seed, fallback_ix, chunk = 0, 0, 2048
    if parser.has_section("simulate"):
        sec = parser["simulate"]
        truth_over = _distribution_kwargs(parser, "simulate", prefix="truth_")
        truth_spec.update(truth_over)
        if "x0" in sec:
            x0 = _parse_vector("simulate", "x0", sec["x0"])
        if "samples" in sec:
            samples = _parse_int("simulate", "samples", sec["samples"])
        if "seed" in sec:
            seed = _parse_int("simulate", "seed", sec["seed"])
        if "fallback" in sec:
            fallback_ix = _parse_int("simulate", "fallback", sec["fallback"])
        if "chunk" in sec:
            chunk = _parse_int("simulate", "chunk", sec["chunk"])
    if truth_spec and "lo" not in truth_spec:
        truth_spec["lo"] = np.array(amb_base["support_lo"], dtype=float)
        truth_spec["hi"] = np.array(amb_base["support_hi"], dtype=float)
    if samples < 1:
        raise _err("simulate", "samples", "must be at least 1")
    if not (0 <= fallback_ix < control_set.count):
        raise _err("simulate", "fallback",
                   f"control index {fallback_ix} out of range "
                   f"[0, {control_set.count})")
    if x0 is not None and np.asarray(x0).size != n:
        raise _err("simulate", "x0", f"expected {n} coordinates")

    # solver
    solver_kwargs = {}
    if parser.has_section("solver"):
        sec = parser["solver"]
        for key in ("feas_tol", "prune_slack", "lp_tol"):
            if key in sec:
                solver_kwargs[key] = _parse_float("solver", key, sec[key])
        for key in ("max_iterations", "scan_points", "verify_factor",
                    "nominal_atoms"):
            if key in sec:
                solver_kwargs[key] = _parse_int("solver", key, sec[key])
    solver = SolverOptions(**solver_kwargs)

    out_dir = parser.get("output", "dir", fallback="out").strip()

    cfg = RunConfig(
        dynamics=dynamics, region=region, control_set=control_set,
        horizon=horizon,
        grid_lo=np.asarray(grid_lo, dtype=float),
        grid_hi=np.asarray(grid_hi, dtype=float),
        grid_nodes=np.asarray(grid_nodes, dtype=int),
        ambiguity_base=amb_base, ambiguity_overrides=overrides,
        mode=mode, nominal_spec=nominal_spec, alpha=alpha,
        sweep_b=sweep_b, sweep_c=sweep_c, truth_spec=truth_spec,
        x0=np.asarray(x0, dtype=float) if x0 is not None else None,
        samples=samples, seed=seed, fallback=fallback_ix, chunk=chunk,
        solver=solver, out_dir=out_dir,
    )
    _validate_resolved(cfg)
    return cfg


def _explicit_model(parser) -> tuple:
    from .model import AffineDescriptor

    sec = parser["model"]
    for key in ("a_x", "b_u", "offset", "g_w", "controls",
                "safe_lo", "safe_hi"):
        if key not in sec:
            raise _err("model", key, "required for explicit models")
    a_x = _parse_matrix("model", "a_x", sec["a_x"])
    b_u = _parse_matrix("model", "b_u", sec["b_u"])
    offset = _parse_vector("model", "offset", sec["offset"])
    g_w = _parse_matrix("model", "g_w", sec["g_w"])
    controls = _parse_matrix("model", "controls", sec["controls"])
    safe_lo = _parse_vector("model", "safe_lo", sec["safe_lo"])
    safe_hi = _parse_vector("model", "safe_hi", sec["safe_hi"])
    n = a_x.shape[0]
    if a_x.shape != (n, n):
        raise _err("model", "a_x", f"must be square, got {a_x.shape}")
    aff = AffineDescriptor(a_x=a_x, b_u=b_u, c=offset, g_w=g_w)

    def transition(x, u, w, _aff=aff):
        return _aff.apply(x, u, w)

    dynamics = Dynamics(state_dim=n, control_dim=b_u.shape[1],
                        disturbance_dim=g_w.shape[1],
                        transition=transition, affine=aff)
    region = SafeRegion(lo=safe_lo, hi=safe_hi)
    control_set = ControlSet(controls=controls)
    return dynamics, region, control_set


def _validate_resolved(cfg: RunConfig):
    n = cfg.dynamics.state_dim
    if cfg.grid_lo.size != n or cfg.grid_hi.size != n or cfg.grid_nodes.size != n:
        raise _err("grid", "lo/hi/nodes", f"expected {n} entries per field")
    if np.any(cfg.grid_nodes < 2):
        raise _err("grid", "nodes", "need at least 2 nodes per dimension")
    # Ambiguity sets are instantiated (and feasibility-checked) lazily by the
    # commands; here only shapes are verified so errors carry field names.
    l = cfg.dynamics.disturbance_dim
    base = cfg.ambiguity_base
    for key in ("support_lo", "support_hi", "mean", "mean_tol"):
        if np.asarray(base[key]).size != l:
            raise _err("ambiguity", key, f"expected {l} entries")
    if np.asarray(base["second_moment"]).shape != (l, l):
        raise _err("ambiguity", "second_moment", f"expected an {l}x{l} matrix")
