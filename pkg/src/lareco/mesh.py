"""Triangle mesh queries: adjacency, normals, nearest vertex, the PV landmark
walk, rigid registration, and OBJ / landmark-JSON I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    EmptyMesh,
    IsolatedVertex,
)


@dataclass(frozen=True)
class TriMesh:
    """Immutable triangulated surface; adjacency is derived lazily."""

    vertices: np.ndarray = field(repr=False)  # (n, 3) mm
    faces: np.ndarray = field(repr=False)     # (m, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=int).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def _edge_counts(self) -> dict:
        counts = {}
        for tri in self.faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (a, b) if a < b else (b, a)
                counts[key] = counts.get(key, 0) + 1
        return counts

    def boundary_edge_count(self) -> int:
        return sum(1 for c in self._edge_counts().values() if c != 2)

    def is_closed(self) -> bool:
        return len(self.faces) > 0 and self.boundary_edge_count() == 0

    def adjacency(self) -> list:
        """Per-vertex sorted neighbor index lists (cached)."""
        cached = getattr(self, "_adj", None)
        if cached is not None:
            return cached
        neigh = [set() for _ in range(self.n_vertices)]
        for tri in self.faces:
            a, b, c = tri
            neigh[a].update((b, c))
            neigh[b].update((a, c))
            neigh[c].update((a, b))
        adj = [np.array(sorted(s), dtype=int) for s in neigh]
        object.__setattr__(self, "_adj", adj)
        return adj

    def vertex_faces(self) -> list:
        cached = getattr(self, "_vf", None)
        if cached is not None:
            return cached
        vf = [[] for _ in range(self.n_vertices)]
        for fi, tri in enumerate(self.faces):
            for v in tri:
                vf[v].append(fi)
        object.__setattr__(self, "_vf", vf)
        return vf

    def face_normals_area_weighted(self) -> np.ndarray:
        """Cross-product face normals; magnitude is twice the face area."""
        t = self.vertices[self.faces]
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    def signed_volume(self) -> float:
        """Enclosed signed volume (positive for outward-wound closed meshes)."""
        t = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self._edge_counts()) + len(self.faces)

    def transformed(self, transform: "RigidTransform") -> "TriMesh":
        return TriMesh(transform.apply(self.vertices), self.faces)


@dataclass(frozen=True)
class Landmarks:
    """PV ostia centers and the septal entry point, in mm."""

    pv_ls: np.ndarray
    pv_li: np.ndarray
    pv_ri: np.ndarray
    pv_rs: np.ndarray
    septum: np.ndarray

    def __post_init__(self):
        for name in ("pv_ls", "pv_li", "pv_ri", "pv_rs", "septum"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        pv = self.pv_array()
        for i in range(4):
            for j in range(i + 1, 4):
                if np.array_equal(pv[i], pv[j]):
                    raise ValueError("PV landmark points must be pairwise distinct")

    PV_ORDER = ("pv_ls", "pv_li", "pv_ri", "pv_rs")

    def pv_array(self) -> np.ndarray:
        return np.stack([self.pv_ls, self.pv_li, self.pv_ri, self.pv_rs])

    def ordered_points(self) -> np.ndarray:
        """Traversal order: septum, LS, LI, RI, RS."""
        return np.stack([self.septum, self.pv_ls, self.pv_li, self.pv_ri, self.pv_rs])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray     # 3x3, det +1
    translation: np.ndarray  # 3

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def nearest_vertex(mesh: TriMesh, p) -> int:
    """Index of the vertex closest to p; ties go to the lowest index."""
    if mesh.n_vertices == 0:
        raise EmptyMesh("mesh has no vertices")
    d2 = np.einsum("ij,ij->i", mesh.vertices - np.asarray(p, dtype=float),
                   mesh.vertices - np.asarray(p, dtype=float))
    return int(np.argmin(d2))


def vertex_normal(mesh: TriMesh, v: int) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    incident = mesh.vertex_faces()[v]
    if not incident:
        raise IsolatedVertex(f"vertex {v} has no incident face")
    n = mesh.face_normals_area_weighted()[incident].sum(axis=0)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        raise IsolatedVertex(f"vertex {v} normals cancel exactly")
    return n / norm


def find_point_in_pv(mesh: TriMesh, p, d, eps: float) -> int:
    """Slide from the vertex nearest p along direction d: repeatedly step to
    the neighbor whose normalized offset has maximal dot product with d, and
    stop as soon as that maximum drops below eps."""
    if mesh.n_vertices == 0:
        raise EmptyMesh("mesh has no vertices")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    d = np.asarray(d, dtype=float)
    current = nearest_vertex(mesh, p)
    adj = mesh.adjacency()
    visited = {current}
    while True:
        neighbors = adj[current]
        if len(neighbors) == 0:
            return current
        offsets = mesh.vertices[neighbors] - mesh.vertices[current]
        norms = np.linalg.norm(offsets, axis=1)
        norms[norms == 0] = 1.0
        proj = (offsets / norms[:, None]) @ d
        best = int(np.argmax(proj))  # argmax takes the first, i.e. lowest index
        if proj[best] < eps:
            return current
        nxt = int(neighbors[best])
        if nxt in visited:  # numerical safety; cannot happen with exact arithmetic
            return current
        visited.add(nxt)
        current = nxt


def rigid_register(src, dst) -> RigidTransform:
    """Least-squares rotation + translation mapping src onto dst (Kabsch with
    reflection guard), for known correspondences."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst) or len(src) < 3:
        raise ValueError("need equal point counts >= 3")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateConfiguration("source points are collinear or coincident")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    det = np.linalg.det(vt.T @ u.T)
    flip = np.diag([1.0, 1.0, math.copysign(1.0, det)])
    r = vt.T @ flip @ u.T
    # re-orthonormalize against accumulated rounding
    uu, _, vv = np.linalg.svd(r)
    r = uu @ vv
    t = cd - r @ cs
    return RigidTransform(r, t)


def sample_septum(mesh: TriMesh, mean_septum, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Vertex position nearest a Gaussian perturbation of the vertex nearest
    mean_septum; sigma = 0 collapses to the nearest vertex itself."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    c = mesh.vertices[nearest_vertex(mesh, mean_septum)]
    g = c + sigma * rng.standard_normal(3)
    return mesh.vertices[nearest_vertex(mesh, g)].copy()


# ---------------------------------------------------------------------------
# Primitive constructors (generator support and tests)
# ---------------------------------------------------------------------------

def box_mesh(lo, hi) -> TriMesh:
    """Closed axis-aligned box with outward winding."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    quads = [
        (0, 3, 2, 1),  # z = z0, outward -z
        (4, 5, 6, 7),  # z = z1, outward +z
        (0, 1, 5, 4),  # y = y0
        (2, 3, 7, 6),  # y = y1
        (0, 4, 7, 3),  # x = x0
        (1, 2, 6, 5),  # x = x1
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriMesh(v, np.array(faces))


def icosphere(center, radius: float, subdivisions: int = 3) -> TriMesh:
    """Subdivided icosahedron with vertices on the sphere."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        midpoint = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = (verts[a] + verts[b]) / 2.0
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.asarray(verts) * radius + np.asarray(center, dtype=float)
    return TriMesh(v, np.array(faces))


def tube_mesh(start, direction, length: float, radius: float,
              n_rings: int = 12, n_around: int = 16, closed: bool = True) -> TriMesh:
    """Cylinder along a direction, optionally capped at both ends."""
    start = np.asarray(start, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(d @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    verts = []
    for i in range(n_rings + 1):
        c = start + d * (length * i / n_rings)
        for j in range(n_around):
            ang = 2.0 * math.pi * j / n_around
            verts.append(c + radius * (math.cos(ang) * u + math.sin(ang) * w))
    faces = []
    for i in range(n_rings):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            c = (i + 1) * n_around + j
            e = (i + 1) * n_around + (j + 1) % n_around
            faces += [(a, b, e), (a, e, c)]
    if closed:
        bottom = len(verts)
        verts.append(start)
        top = len(verts)
        verts.append(start + d * length)
        for j in range(n_around):
            jn = (j + 1) % n_around
            faces.append((bottom, jn, j))
            faces.append((top, n_rings * n_around + j, n_rings * n_around + jn))
    return TriMesh(np.asarray(verts), np.array(faces))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def save_obj(path, mesh: TriMesh) -> None:
    """ASCII OBJ: v/f records, 1-based indices."""
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=int))


def save_landmarks(path, lm: Landmarks) -> None:
    payload = {
        "pv_ls": lm.pv_ls.tolist(),
        "pv_li": lm.pv_li.tolist(),
        "pv_ri": lm.pv_ri.tolist(),
        "pv_rs": lm.pv_rs.tolist(),
        "septum": lm.septum.tolist(),
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_landmarks(path) -> Landmarks:
    with open(path) as f:
        payload = json.load(f)
    return Landmarks(payload["pv_ls"], payload["pv_li"], payload["pv_ri"],
                     payload["pv_rs"], payload["septum"])
