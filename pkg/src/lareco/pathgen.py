"""Synthetic catheter path synthesis: landmark projection onto a sample mesh,
distance-transform-weighted voxel graph, Dijkstra routing with per-leg alpha
squashing, stochastic augmentation, and path voxelization."""

from __future__ import annotations

import csv
import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DisconnectedInterior, LandmarkOutside, Unreachable
from .grid import STRUCT_6, GridSpec, OccupancyVolume, signed_distance_transform
from .mesh import (
    Landmarks,
    TriMesh,
    find_point_in_pv,
    nearest_vertex,
    sample_septum,
    vertex_normal,
)

log = logging.getLogger(__name__)

SECTION_NAMES = ("septum_to_ls", "ls_to_li", "li_to_ri", "ri_to_rs")
SECTION_AUGMENTED = "augmented"

DEFAULT_ALPHAS = (0.001, 4.0, 1.0, 4.0)


@dataclass(frozen=True)
class PathCloud:
    """Ordered catheter points in mm with per-point section labels."""

    points: np.ndarray = field(repr=False)   # (k, 3)
    sections: tuple = field(repr=False)      # k section labels

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sections", tuple(self.sections))
        if len(pts) == 0:
            raise ValueError("path must be non-empty")
        if len(pts) != len(self.sections):
            raise ValueError("points and sections length mismatch")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class VoxelGraph:
    """Implicit 6-adjacency graph over the true voxels of a volume with
    node weight (m_w - w_dt)^alpha; edge cost is the mean of its endpoint
    node weights."""

    grid: GridSpec
    node_weight: np.ndarray = field(repr=False)  # full grid, 0 outside nodes
    node_mask: np.ndarray = field(repr=False)
    alpha: float = 1.0

    def edge_cost(self, u: tuple, v: tuple) -> float:
        return 0.5 * (float(self.node_weight[u]) + float(self.node_weight[v]))


@dataclass(frozen=True)
class AugmentConfig:
    n: int = 6
    sigma: float = 4.0   # mm
    s_f: float = 0.5     # keep probability
    mu_s: float = 2.0    # mm translation noise scale

    def __post_init__(self):
        if self.n < 0 or self.sigma < 0 or self.mu_s < 0 or not (0.0 <= self.s_f <= 1.0):
            raise ValueError("invalid augmentation config")

    def to_dict(self) -> dict:
        return {"n": self.n, "sigma": self.sigma, "s_f": self.s_f, "mu_s": self.mu_s}


# ---------------------------------------------------------------------------
# Landmark projection
# ---------------------------------------------------------------------------

def project_landmarks(mean_mesh: TriMesh, mean_landmarks: Landmarks,
                      target_mesh: TriMesh, eps: float,
                      septum_sigma: float = 3.0,
                      rng: np.random.Generator | None = None) -> Landmarks:
    """Carry the reference-shape landmarks onto a target mesh: each PV point
    slides along the reference normal via the PV walk; the septum is sampled
    around the nearest target vertex."""
    if rng is None:
        rng = np.random.default_rng(0)
    projected = {}
    for name in Landmarks.PV_ORDER:
        lm = getattr(mean_landmarks, name)
        normal = vertex_normal(mean_mesh, nearest_vertex(mean_mesh, lm))
        v = find_point_in_pv(target_mesh, lm, normal, eps)
        projected[name] = target_mesh.vertices[v].copy()
    septum = sample_septum(target_mesh, mean_landmarks.septum, septum_sigma, rng)
    return Landmarks(projected["pv_ls"], projected["pv_li"], projected["pv_ri"],
                     projected["pv_rs"], septum)


# ---------------------------------------------------------------------------
# Graph construction and routing
# ---------------------------------------------------------------------------

def build_graph(vol: OccupancyVolume, alpha: float) -> VoxelGraph:
    """Nodes are the true voxels; node weight (m_w - w_dt)^alpha where w_dt is
    the interior distance transform and m_w = max interior w_dt + 1 (strictly
    positive weights by construction)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    mask = vol.data
    if mask.sum() < 2:
        raise DisconnectedInterior("need at least 2 interior voxels")
    _, n_comp = ndimage.label(mask, structure=STRUCT_6)
    if n_comp != 1:
        raise DisconnectedInterior(f"interior has {n_comp} 6-connected components")
    sdt = signed_distance_transform(vol).data
    w_dt = np.where(mask, sdt, 0.0)
    m_w = float(w_dt[mask].max()) + 1.0
    weight = np.zeros(vol.grid.dims)
    weight[mask] = (m_w - w_dt[mask]) ** alpha
    return VoxelGraph(vol.grid, weight, mask.copy(), alpha)


_NEIGHBOR_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def dijkstra(graph: VoxelGraph, s: tuple, t: tuple) -> list:
    """Minimal-cost voxel path from s to t (inclusive), edge cost = mean of
    endpoint node weights, ties broken lexicographically on voxel index."""
    s, t = tuple(int(c) for c in s), tuple(int(c) for c in t)
    for node in (s, t):
        if not graph.node_mask[node]:
            raise ValueError(f"{node} is not a graph node")
    if s == t:
        return [s]
    dims = graph.grid.dims
    dist = {s: 0.0}
    prev = {}
    heap = [(0.0, s)]
    visited = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in visited:
            continue
        visited.add(u)
        if u == t:
            break
        wu = float(graph.node_weight[u])
        for off in _NEIGHBOR_OFFSETS:
            v = (u[0] + off[0], u[1] + off[1], u[2] + off[2])
            if not (0 <= v[0] < dims[0] and 0 <= v[1] < dims[1] and 0 <= v[2] < dims[2]):
                continue
            if not graph.node_mask[v] or v in visited:
                continue
            nd = d + 0.5 * (wu + float(graph.node_weight[v]))
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if t not in visited:
        raise Unreachable(f"{t} not reachable from {s}")
    path = [t]
    while path[-1] != s:
        path.append(prev[path[-1]])
    path.reverse()
    return path


def path_cost(graph: VoxelGraph, path: list) -> float:
    return sum(graph.edge_cost(path[i], path[i + 1]) for i in range(len(path) - 1))


def snap_to_interior(vol: OccupancyVolume, point, max_dist_voxels: float = 2.0) -> tuple:
    """Nearest true voxel to a world point, within a tolerance in voxel units."""
    rel = (np.asarray(point, dtype=float) - np.asarray(vol.grid.origin_mm)) / vol.grid.spacing_mm
    interior = np.argwhere(vol.data)
    if len(interior) == 0:
        raise LandmarkOutside("volume has no interior voxels")
    d2 = np.einsum("ij,ij->i", interior - rel, interior - rel)
    best = int(np.argmin(d2))
    if d2[best] > max_dist_voxels ** 2:
        raise LandmarkOutside(
            f"landmark {np.asarray(point)} is {np.sqrt(d2[best]):.2f} voxels "
            f"from the nearest interior voxel (limit {max_dist_voxels})")
    return tuple(int(c) for c in interior[best])


def compose_path(vol: OccupancyVolume, lm: Landmarks,
                 alphas=DEFAULT_ALPHAS) -> PathCloud:
    """Concatenate the four routed legs septum->LS->LI->RI->RS, each on its own
    alpha-squashed graph; duplicate junction voxels removed."""
    alphas = tuple(float(a) for a in alphas)
    if len(alphas) != 4:
        raise ValueError("need exactly 4 alphas")
    waypoints = [snap_to_interior(vol, p) for p in lm.ordered_points()]
    voxels = []
    sections = []
    for leg in range(4):
        graph = build_graph(vol, alphas[leg])
        leg_path = dijkstra(graph, waypoints[leg], waypoints[leg + 1])
        if voxels and leg_path and leg_path[0] == voxels[-1]:
            leg_path = leg_path[1:]
        voxels.extend(leg_path)
        sections.extend([SECTION_NAMES[leg]] * len(leg_path))
    points = vol.grid.world(np.asarray(voxels, dtype=float))
    return PathCloud(points, sections)


def augment_path(path: PathCloud, vol: OccupancyVolume, cfg: AugmentConfig,
                 rng: np.random.Generator) -> PathCloud:
    """Append noisy points around each path point: draw n Gaussian offsets per
    point, keep each with probability s_f, drop draws landing outside the
    volume, then jitter survivors by Gaussian translation scaled by mu_s."""
    if cfg.n == 0 or cfg.s_f == 0.0:
        return path
    new_pts = []
    for x_p in path.points:
        draws = x_p + cfg.sigma * rng.standard_normal((cfg.n, 3))
        keep = rng.random(cfg.n) < cfg.s_f
        for ok, pt in zip(keep, draws):
            if not ok:
                continue
            idx = vol.grid.index_of(pt)
            if not vol.grid.contains_index(idx)[0]:
                continue
            if not vol.data[tuple(idx)]:
                continue
            shift = cfg.mu_s * rng.standard_normal(3)
            new_pts.append(pt + shift)
    if not new_pts:
        return path
    pts = np.vstack([path.points, np.asarray(new_pts)])
    sections = path.sections + (SECTION_AUGMENTED,) * len(new_pts)
    return PathCloud(pts, sections)


def path_to_volume(path: PathCloud, grid: GridSpec) -> OccupancyVolume:
    """Voxelize the path on half-open voxel cells; out-of-extent points are
    dropped (count logged)."""
    idx = grid.index_of(path.points)
    inside = grid.contains_index(idx)
    dropped = int((~inside).sum())
    if dropped:
        log.warning("path_to_volume: dropped %d out-of-extent points", dropped)
    data = np.zeros(grid.dims, dtype=bool)
    kept = idx[inside]
    if len(kept):
        data[tuple(kept.T)] = True
    return OccupancyVolume(grid, data)


# ---------------------------------------------------------------------------
# File I/O: CSV with header x_mm,y_mm,z_mm,section
# ---------------------------------------------------------------------------

def save_path_csv(path_file, path: PathCloud) -> None:
    with open(path_file, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x_mm", "y_mm", "z_mm", "section"])
        for pt, sec in zip(path.points, path.sections):
            writer.writerow([f"{pt[0]:.9g}", f"{pt[1]:.9g}", f"{pt[2]:.9g}", sec])


def load_path_csv(path_file) -> PathCloud:
    pts, secs = [], []
    with open(path_file, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            pts.append([float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])])
            secs.append(row["section"])
    return PathCloud(np.asarray(pts), secs)
