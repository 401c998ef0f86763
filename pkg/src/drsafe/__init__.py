"""Distributionally robust probabilistic safe sets for controlled systems
with moment-bounded disturbance ambiguity.

The core pipeline: describe a system (`model`), an ambiguity set over the
disturbance distribution (`ambiguity`), run the backward worst-case value
recursion where each inner problem is solved through its dual semi-infinite
program (`dual_sip`, `bellman`), threshold the value functions into safe
sets and a safety-oriented controller (`policy`), and validate in closed
loop by Monte Carlo (`simulate`).  The `oracle` module provides an
independent brute-force primal solver used for cross-checking, and `cli`
binds everything to config files and CSV/PNG artifacts.
"""

from .ambiguity import (FEASIBILITY_ATOMS, FeasibilityResult,
                        MomentAmbiguitySet, NominalDistribution,
                        check_feasible, singleton)
from .bellman import (BackupResult, RecursionResult, StateGrid, ValueFunction,
                      backup, build_grid, solve_recursion, terminal)
from .config import RunConfig, load_config
from .dual_sip import (DualCertificate, DualMultipliers, PiecewisePayoff1D,
                       ScanPayoff, SolverOptions, dual_inner_value,
                       most_violated_point, payoff_from_value_function,
                       solve_dual_sip, solve_subproblem, verify_certificate)
from .errors import (AtomGridInfeasibleError, ConfigurationError, DrsafeError,
                     InfeasibleAmbiguityError, SolverError)
from .model import (AffineDescriptor, ControlSet, Dynamics, SafeRegion,
                    TclModel, step, tcl_preset)
from .oracle import nominal_expectation, primal_value
from .policy import (SafeSetFamily, SafetyOrientedController, TablePolicy,
                     controller_table, nearest_nodes, threshold)
from .simulate import (SimulationReport, Trajectory, disturbance_block,
                       monte_carlo, rollout, trajectory_stream)

__version__ = "0.1.0"

__all__ = [
    "AffineDescriptor", "AtomGridInfeasibleError", "BackupResult",
    "ConfigurationError", "ControlSet", "DrsafeError", "DualCertificate",
    "DualMultipliers", "Dynamics", "FEASIBILITY_ATOMS", "FeasibilityResult",
    "InfeasibleAmbiguityError", "MomentAmbiguitySet", "NominalDistribution",
    "PiecewisePayoff1D", "RecursionResult", "RunConfig", "SafeRegion",
    "SafeSetFamily", "SafetyOrientedController", "ScanPayoff",
    "SimulationReport", "SolverError", "SolverOptions", "StateGrid",
    "TablePolicy", "TclModel", "Trajectory", "ValueFunction", "backup",
    "build_grid", "check_feasible", "controller_table", "disturbance_block",
    "dual_inner_value", "load_config", "monte_carlo", "most_violated_point",
    "nearest_nodes", "nominal_expectation", "payoff_from_value_function",
    "primal_value", "rollout", "singleton", "solve_dual_sip",
    "solve_recursion", "solve_subproblem", "step", "tcl_preset", "terminal",
    "threshold", "trajectory_stream", "verify_certificate",
]
