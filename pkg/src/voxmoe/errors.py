"""Exception types shared across the package."""


class VoxmoeError(Exception):
    """Base class for package-specific errors."""


class InvalidGridError(VoxmoeError, ValueError):
    """Unusable voxel grid (non-positive cell size, bad extents, coord outside them)."""


class ShapeError(VoxmoeError, ValueError):
    """Array or channel-count mismatch between connected components."""


class UnsupportedKernelError(VoxmoeError, ValueError):
    """Kernel geometry outside the supported family (even sizes)."""


class CameraError(VoxmoeError, ValueError):
    """Degenerate camera intrinsics or extrinsics."""


class BudgetError(VoxmoeError, ValueError):
    """Memory budget smaller than a single pooled feature vector."""


class MissingModalityError(VoxmoeError, RuntimeError):
    """Routing selected an expert whose input modality was not supplied."""


class EmergencyConflictError(VoxmoeError, RuntimeError):
    """A second emergency predicate was registered without removing the first."""


class RegistryError(VoxmoeError, KeyError):
    """A required parameter group is missing from the model registry."""


class GraphError(VoxmoeError, ValueError):
    """Malformed computation graph (cycle, dangling edge, missing input)."""


class PlanError(VoxmoeError, ValueError):
    """Invalid thread-stage boundary layout."""
