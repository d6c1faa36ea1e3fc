"""Exception types shared across the planner modules."""


class VoxplanError(Exception):
    """Base class for all planner errors."""


class MapBoundsError(VoxplanError):
    """A queried point or pose lies outside the voxel map."""


class StaleEsdfError(VoxplanError):
    """A distance query was issued while the ESDF is out of date."""


class SplineDomainError(VoxplanError):
    """Evaluation time outside the valid B-spline domain."""


class ConfigError(VoxplanError):
    """Invalid or contradictory configuration values."""


class InfeasiblePlanError(VoxplanError):
    """No feasible trajectory could be produced for the current query."""


class MapGenerationError(VoxplanError):
    """Random obstacle placement failed within the retry budget."""


class RefineFailureError(VoxplanError):
    """Risk-aware refinement could not establish the stopping criterion."""
