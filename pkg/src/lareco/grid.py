"""Binary occupancy volumes and scalar fields on a regular voxel lattice.

Conventions: arrays are indexed ``[ix, iy, iz]``; ``world = origin + index * spacing``
(origin is the center of voxel (0,0,0)); distances from the distance transform are
in voxel units, conversion to mm happens in the metric layer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateVolume,
    GridMismatch,
    NoSurface,
    OpenMesh,
    OutOfExtent,
)

log = logging.getLogger(__name__)

# 6-connectivity structuring element
STRUCT_6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class GridSpec:
    """Regular isotropic voxel lattice."""

    dims: tuple[int, int, int]
    spacing_mm: float
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise ValueError(f"dims must be three integers >= 2, got {self.dims}")
        if not self.spacing_mm > 0:
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def world(self, index) -> np.ndarray:
        """World position (mm) of voxel centers for integer or fractional indices."""
        return np.asarray(self.origin_mm) + np.asarray(index, dtype=float) * self.spacing_mm

    def index_of(self, points) -> np.ndarray:
        """Voxel index containing each point (half-open cells centered on lattice)."""
        rel = (np.asarray(points, dtype=float) - np.asarray(self.origin_mm)) / self.spacing_mm
        return np.floor(rel + 0.5).astype(int)

    def contains_index(self, idx) -> np.ndarray:
        idx = np.atleast_2d(idx)
        return np.all((idx >= 0) & (idx < np.array(self.dims)), axis=1)

    @property
    def extent_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """(min_corner, max_corner) of the full grid volume in mm."""
        lo = np.asarray(self.origin_mm) - 0.5 * self.spacing_mm
        hi = np.asarray(self.origin_mm) + (np.array(self.dims) - 0.5) * self.spacing_mm
        return lo, hi

    @staticmethod
    def centered(n: int, spacing_mm: float) -> "GridSpec":
        """Cubic grid of n^3 voxels centered on the world origin."""
        half = (n - 1) * spacing_mm / 2.0
        return GridSpec((n, n, n), spacing_mm, (-half, -half, -half))


def _check_dims(grid: GridSpec, data: np.ndarray):
    if tuple(data.shape) != grid.dims:
        raise ValueError(f"data shape {data.shape} does not match grid dims {grid.dims}")


@dataclass(frozen=True)
class OccupancyVolume:
    """Binary voxel set: true = inside or on the boundary of the shape."""

    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=bool))
        _check_dims(self.grid, self.data)

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ScalarField:
    """Real-valued field on the same lattice."""

    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float))
        _check_dims(self.grid, self.data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ScalarField values must be finite")


@dataclass(frozen=True)
class VoxelSet:
    """Set of voxel indices on a grid."""

    grid: GridSpec
    voxels: np.ndarray = field(repr=False)  # (k, 3) int

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=int).reshape(-1, 3)
        object.__setattr__(self, "voxels", vox)
        if len(vox) and not np.all(self.grid.contains_index(vox)):
            raise ValueError("voxel index outside grid dims")

    def __len__(self):
        return len(self.voxels)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid.dims, dtype=bool)
        if len(self.voxels):
            m[tuple(self.voxels.T)] = True
        return m


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

# fixed tiny irrational-ish ray offsets: avoid rays grazing mesh edges/vertices
_RAY_EPS_Y = 1.236067977e-7
_RAY_EPS_Z = 2.449489743e-7


def voxelize(mesh, grid: GridSpec) -> OccupancyVolume:
    """Voxelize a closed triangle mesh: voxel true iff its center is inside or
    on the surface.  Inside test is parity ray casting along +x with a fixed
    sub-voxel perturbation of the ray origin; centers lying exactly on the
    surface count as inside.
    """
    if mesh.boundary_edge_count() > 0:
        raise OpenMesh(f"mesh has {mesh.boundary_edge_count()} boundary edges")
    lo, hi = grid.extent_mm
    vmin, vmax = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    if np.any(vmin < lo) or np.any(vmax > hi):
        raise OutOfExtent("mesh bounding box exceeds grid extent")

    nx, ny, nz = grid.dims
    s = grid.spacing_mm
    origin = np.asarray(grid.origin_mm)
    yc = origin[1] + np.arange(ny) * s
    zc = origin[2] + np.arange(nz) * s
    xc = origin[0] + np.arange(nx) * s

    # parity via crossing count per (y, z) ray
    crossings = [[[] for _ in range(nz)] for _ in range(ny)]
    tris = mesh.vertices[mesh.faces]  # (m, 3, 3)
    ey, ez = _RAY_EPS_Y * s, _RAY_EPS_Z * s
    for tri in tris:
        ty, tz = tri[:, 1], tri[:, 2]
        j0 = max(0, int(np.ceil((ty.min() - ey - origin[1]) / s)))
        j1 = min(ny - 1, int(np.floor((ty.max() - ey - origin[1]) / s)))
        k0 = max(0, int(np.ceil((tz.min() - ez - origin[2]) / s)))
        k1 = min(nz - 1, int(np.floor((tz.max() - ez - origin[2]) / s)))
        if j1 < j0 or k1 < k0:
            continue
        a, b, c = tri
        for j in range(j0, j1 + 1):
            qy = yc[j] + ey
            for k in range(k0, k1 + 1):
                qz = zc[k] + ez
                # 2D barycentric in the (y, z) projection
                d = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])
                if d == 0.0:
                    continue  # degenerate projection: ray parallel to face plane
                u = ((qy - a[1]) * (c[2] - a[2]) - (qz - a[2]) * (c[1] - a[1])) / d
                v = ((b[1] - a[1]) * (qz - a[2]) - (b[2] - a[2]) * (qy - a[1])) / d
                if u < 0 or v < 0 or u + v > 1:
                    continue
                xint = a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0])
                crossings[j][k].append(xint)

    occ = np.zeros(grid.dims, dtype=bool)
    for j in range(ny):
        for k in range(nz):
            xs = crossings[j][k]
            if not xs:
                continue
            xs = np.sort(np.asarray(xs))
            # parity: number of crossings strictly beyond the voxel center
            counts = len(xs) - np.searchsorted(xs, xc, side="right")
            occ[:, j, k] = (counts % 2) == 1

    # centers exactly on the surface count as inside
    tol = 1e-9 * s
    for tri in tris:
        tmin = tri.min(axis=0) - tol
        tmax = tri.max(axis=0) + tol
        i0 = np.maximum(np.ceil((tmin - origin) / s), 0).astype(int)
        i1 = np.minimum(np.floor((tmax - origin) / s), np.array(grid.dims) - 1).astype(int)
        if np.any(i1 < i0):
            continue
        ix, iy, iz = np.meshgrid(
            np.arange(i0[0], i1[0] + 1),
            np.arange(i0[1], i1[1] + 1),
            np.arange(i0[2], i1[2] + 1),
            indexing="ij",
        )
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        pts = origin + idx * s
        d = _point_triangle_distance(pts, tri)
        on = d <= tol
        if np.any(on):
            occ[tuple(idx[on].T)] = True
    return OccupancyVolume(grid, occ)


def _point_triangle_distance(pts: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to a single triangle."""
    a, b, c = tri
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = n @ n
    ap = pts - a
    if nn == 0.0:
        # degenerate triangle: fall back to min distance to the three edges
        return np.minimum.reduce(
            [_point_segment_distance(pts, a, b),
             _point_segment_distance(pts, b, c),
             _point_segment_distance(pts, c, a)]
        )
    # project into the plane, barycentric test
    dist_plane = (ap @ n) / math.sqrt(nn)
    proj = pts - dist_plane[:, None] * (n / math.sqrt(nn))
    d00, d01, d11 = ab @ ab, ab @ ac, ac @ ac
    pv = proj - a
    d20, d21 = pv @ ab, pv @ ac
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    inside = (v >= 0) & (w >= 0) & (v + w <= 1)
    d_edges = np.minimum.reduce(
        [_point_segment_distance(pts, a, b),
         _point_segment_distance(pts, b, c),
         _point_segment_distance(pts, c, a)]
    )
    return np.where(inside, np.abs(dist_plane), d_edges)


def _point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(pts - closest, axis=1)


def extract_boundary(vol: OccupancyVolume) -> VoxelSet:
    """True voxels with at least one false 6-neighbor (grid faces count as false)."""
    mask = _boundary_mask(vol.data)
    return VoxelSet(vol.grid, np.argwhere(mask))


def _boundary_mask(data: np.ndarray) -> np.ndarray:
    padded = np.pad(data, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=STRUCT_6)[1:-1, 1:-1, 1:-1]
    return data & ~eroded


def signed_distance_transform(vol: OccupancyVolume) -> ScalarField:
    """Per-voxel Euclidean distance (voxel units) to the nearest boundary voxel;
    zero on the boundary, positive inside, negative outside."""
    if not vol.data.any() or vol.data.all():
        raise DegenerateVolume("volume is all-false or all-true")
    boundary = _boundary_mask(vol.data)
    dist = ndimage.distance_transform_edt(~boundary)
    sign = np.where(vol.data, 1.0, -1.0)
    sign[boundary] = 0.0
    return ScalarField(vol.grid, dist * sign)


def gaussian_smooth(fld: ScalarField, sigma: float) -> ScalarField:
    """Separable discrete Gaussian, kernel radius ceil(3*sigma), normalized,
    clamped edges.  sigma in voxel units; sigma = 0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return ScalarField(fld.grid, fld.data.copy())
    r = int(math.ceil(3.0 * sigma))
    i = np.arange(-r, r + 1, dtype=float)
    kernel = np.exp(-0.5 * (i / sigma) ** 2)
    kernel /= kernel.sum()
    out = fld.data
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        out = np.apply_along_axis(
            lambda m: np.convolve(m, kernel, mode="valid"), axis, padded
        )
    return ScalarField(fld.grid, out)


def boundary_weight_mask(vol: OccupancyVolume, alpha: float = 14.0, sigma: float = 1.5) -> ScalarField:
    """Loss weight per voxel, maximal on the shape boundary:
    W = (1 + alpha) / (1 + D') with D' the Gaussian-smoothed unsigned
    distance-to-boundary (voxel units)."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    sdt = signed_distance_transform(vol)
    dprime = gaussian_smooth(ScalarField(vol.grid, np.abs(sdt.data)), sigma)
    return ScalarField(vol.grid, (1.0 + alpha) / (1.0 + dprime.data))


def marching_cubes(fld: ScalarField, iso: float):
    """Extract the iso-surface as a triangle mesh with outward normals
    (outward from the > iso region).  The field is padded by one layer of the
    field minimum so surfaces touching the grid face are closed."""
    from .mesh import TriMesh  # local import: grid <-> mesh modules are peers
    from skimage import measure

    data = fld.data
    if data.min() >= iso or data.max() <= iso:
        raise NoSurface(f"iso {iso} not strictly inside field range "
                        f"[{data.min()}, {data.max()}]")
    padded = np.pad(data, 1, constant_values=data.min())
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso)
    verts = (verts - 1.0) * fld.grid.spacing_mm + np.asarray(fld.grid.origin_mm)
    mesh = TriMesh(verts, faces.astype(int))
    if mesh.signed_volume() < 0:
        mesh = TriMesh(verts, faces[:, ::-1].astype(int))
    return mesh


def mean_shape(volumes) -> tuple[ScalarField, OccupancyVolume]:
    """Voxel-wise mean of a stack of volumes and its binarization at >= 0.5."""
    if not volumes:
        raise ValueError("need at least one volume")
    grid = volumes[0].grid
    for v in volumes:
        if v.grid != grid:
            raise GridMismatch("volumes on different grids")
    mean = np.mean([v.data for v in volumes], axis=0)
    return ScalarField(grid, mean), OccupancyVolume(grid, mean >= 0.5)


# ---------------------------------------------------------------------------
# File I/O:  <name>.vol.json header + <name>.vol.raw little-endian, x-fastest
# ---------------------------------------------------------------------------

def save_volume(base_path, obj) -> None:
    """Write OccupancyVolume (u8) or ScalarField (f32) as .vol.json + .vol.raw."""
    base = str(base_path)
    if isinstance(obj, OccupancyVolume):
        dtype, arr = "u8", obj.data.astype("<u1")
    elif isinstance(obj, ScalarField):
        dtype, arr = "f32", obj.data.astype("<f4")
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    header = {
        "dims": list(obj.grid.dims),
        "spacing_mm": obj.grid.spacing_mm,
        "origin_mm": list(obj.grid.origin_mm),
        "dtype": dtype,
    }
    with open(base + ".vol.json", "w") as f:
        json.dump(header, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    # x-fastest order
    arr.ravel(order="F").tofile(base + ".vol.raw")


def load_volume(base_path):
    """Read a .vol.json/.vol.raw pair; returns OccupancyVolume or ScalarField."""
    base = str(base_path)
    with open(base + ".vol.json") as f:
        header = json.load(f)
    grid = GridSpec(tuple(header["dims"]), header["spacing_mm"], tuple(header["origin_mm"]))
    np_dtype = {"u8": "<u1", "f32": "<f4"}[header["dtype"]]
    raw = np.fromfile(base + ".vol.raw", dtype=np_dtype)
    if raw.size != grid.n_voxels:
        raise ValueError(f"raw size {raw.size} != expected {grid.n_voxels}")
    data = raw.reshape(grid.dims, order="F")
    if header["dtype"] == "u8":
        return OccupancyVolume(grid, data.astype(bool))
    return ScalarField(grid, data.astype(float))
