"""Exception types shared across the package."""


class LarecoError(Exception):
    """Base class for all package errors."""


class OpenMesh(LarecoError):
    """Mesh has a boundary edge (not watertight)."""


class OutOfExtent(LarecoError):
    """Geometry does not fit inside the grid extent."""


class DegenerateVolume(LarecoError):
    """Volume is all-true or all-false."""


class GridMismatch(LarecoError):
    """Operands live on different grids."""


class NoSurface(LarecoError):
    """Iso level is never crossed by the field."""


class EmptyMesh(LarecoError):
    """Mesh has no vertices."""


class IsolatedVertex(LarecoError):
    """Vertex has no incident face."""


class DegenerateConfiguration(LarecoError):
    """Point set is rank deficient (collinear or coincident)."""


class RejectionExhausted(LarecoError):
    """MVN rejection sampling hit the retry limit."""


class DisconnectedInterior(LarecoError):
    """Foreground voxels do not form a single 6-connected component."""


class Unreachable(LarecoError):
    """No path between the requested graph nodes."""


class LandmarkOutside(LarecoError):
    """Landmark cannot be snapped to an interior voxel."""


class ShapeMismatch(LarecoError):
    """Tensor shapes are inconsistent."""


class EmptyBoundary(LarecoError):
    """Volume has no boundary voxels."""


class NoVerticesInRadius(LarecoError):
    """No mesh vertices fall within the requested radius."""


class EmptyDataset(LarecoError):
    """Training requires at least one sample."""
