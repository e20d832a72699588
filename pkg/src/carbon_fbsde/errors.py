"""Exception hierarchy shared across the package.

Every error the package raises on purpose derives from CarbonMarketError so
callers (and the CLI exit-code mapping) can tell deliberate failures from
bugs.
"""


class CarbonMarketError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(CarbonMarketError):
    """Malformed, missing, or inconsistent configuration input."""


class ValidationError(CarbonMarketError):
    """A declared model property failed its (sampled) check."""


class CoverageError(CarbonMarketError):
    """A grid or sample box does not cover the region a query needs."""


class SolverError(CarbonMarketError):
    """The finite-volume update produced a non-finite or unstable state."""


class InvariantError(CarbonMarketError):
    """A solved field violates one of the hard structural invariants."""


class ConvergenceError(CarbonMarketError):
    """An iterative procedure exhausted its budget before its tolerance."""


class SimulationError(CarbonMarketError):
    """Path simulation failed, e.g. too many paths left the covered box."""


class ArtifactError(CarbonMarketError):
    """A stored artifact is missing, corrupt, or fails its hash check."""
