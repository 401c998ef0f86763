"""Exception types shared across the toolkit."""


class DrsafeError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DrsafeError):
    """A model, grid, or run configuration is inconsistent or malformed."""


class InfeasibleAmbiguityError(DrsafeError):
    """No distribution on the given support satisfies the moment constraints
    (as certified on the construction-time atom grid)."""


class AtomGridInfeasibleError(DrsafeError):
    """The atomized moment LP is infeasible at the requested resolution.

    The true (continuum) problem may still be feasible; retry with a finer
    atom grid.
    """


class SolverError(DrsafeError):
    """An LP subsolver failed for a reason other than infeasibility
    (numerical breakdown, unexpected status, unbounded after reseeding)."""
