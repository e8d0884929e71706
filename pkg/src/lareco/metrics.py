"""Evaluation metrics: DICE, symmetric average boundary distance, point/mesh
distances, radius-limited surface distance, and the mean-shape comparison
harness with a one-tailed paired t-test."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import t as student_t

from .errors import EmptyBoundary, EmptyMesh, GridMismatch, NoVerticesInRadius
from .grid import OccupancyVolume, extract_boundary
from .mesh import TriMesh

log = logging.getLogger(__name__)


def dice(x: OccupancyVolume, y: OccupancyVolume) -> float:
    """2|x n y| / (|x| + |y|); 1.0 when both volumes are empty."""
    if x.grid != y.grid:
        raise GridMismatch("volumes on different grids")
    nx, ny = x.count(), y.count()
    if nx + ny == 0:
        log.warning("dice of two empty volumes, returning 1.0 by convention")
        return 1.0
    inter = int(np.sum(x.data & y.data))
    return 2.0 * inter / (nx + ny)


def avdist(x: OccupancyVolume, y: OccupancyVolume) -> float:
    """Symmetric mean of directed nearest-boundary-voxel Euclidean distances,
    in mm."""
    if x.grid != y.grid:
        raise GridMismatch("volumes on different grids")
    bx = extract_boundary(x).voxels.astype(float)
    by = extract_boundary(y).voxels.astype(float)
    if len(bx) == 0 or len(by) == 0:
        raise EmptyBoundary("a volume has no boundary voxels")
    d_xy = cKDTree(by).query(bx)[0]
    d_yx = cKDTree(bx).query(by)[0]
    return float((0.5 * d_xy.mean() + 0.5 * d_yx.mean()) * x.grid.spacing_mm)


def point_to_mesh(points, mesh: TriMesh):
    """Distance from each point to the closest mesh vertex (vertex distance,
    not face distance).  Returns (per-point distances, mean), in mm."""
    if mesh.n_vertices == 0:
        raise EmptyMesh("mesh has no vertices")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = cKDTree(mesh.vertices).query(pts)[0]
    return d, float(d.mean())


def radius_limited_surface_distance(a: TriMesh, b: TriMesh, centers=None,
                                    radius_mm: float | None = None) -> float:
    """Symmetric mean nearest-vertex distance between two meshes, with each
    direction's source vertices restricted to those within radius_mm of any
    center; radius_mm None uses all vertices."""
    if a.n_vertices == 0 or b.n_vertices == 0:
        raise EmptyMesh("mesh has no vertices")

    def select(mesh):
        if radius_mm is None:
            return mesh.vertices
        if centers is None or len(centers) == 0:
            raise ValueError("centers required with a finite radius")
        d = cKDTree(np.atleast_2d(np.asarray(centers, dtype=float))).query(mesh.vertices)[0]
        sel = mesh.vertices[d <= radius_mm]
        if len(sel) == 0:
            raise NoVerticesInRadius("no source vertices within radius")
        return sel

    sa, sb = select(a), select(b)
    d_ab = cKDTree(b.vertices).query(sa)[0]
    d_ba = cKDTree(a.vertices).query(sb)[0]
    return float(0.5 * d_ab.mean() + 0.5 * d_ba.mean())


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    dice: float
    avdist_mm: float
    per_sample: list = field(default_factory=list)  # (id, dice, avdist_mm)
    baseline: dict | None = None   # {"dice", "avdist_mm", "per_sample"}
    t_dice: float | None = None    # paired t of (recon - baseline) dice
    p_dice: float | None = None
    t_avdist: float | None = None  # paired t of (baseline - recon) avdist
    p_avdist: float | None = None

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "avdist_mm": self.avdist_mm,
            "per_sample": [{"id": i, "dice": d, "avdist_mm": a}
                           for i, d, a in self.per_sample],
            "baseline": self.baseline,
            "t_dice": self.t_dice, "p_dice": self.p_dice,
            "t_avdist": self.t_avdist, "p_avdist": self.p_avdist,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, separators=(",", ":"))
            f.write("\n")

    def save_csv(self, path) -> None:
        base = self.baseline or {}
        base_rows = {i: (d, a) for i, d, a in base.get("per_sample", [])}
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "dice", "avdist_mm", "baseline_dice", "baseline_avdist_mm"])
            for i, d, a in self.per_sample:
                bd, ba = base_rows.get(i, ("", ""))
                writer.writerow([i, f"{d:.9g}", f"{a:.9g}",
                                 f"{bd:.9g}" if bd != "" else "",
                                 f"{ba:.9g}" if ba != "" else ""])


def paired_t_statistic(differences) -> float:
    """One-sample t statistic of paired differences; 0 when all differences
    vanish."""
    d = np.asarray(differences, dtype=float)
    n = len(d)
    if n < 2:
        return 0.0
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 0.0 if d.mean() == 0.0 else math.copysign(math.inf, d.mean())
    return float(d.mean() / (sd / math.sqrt(n)))


def one_tailed_p(t_stat: float, n: int) -> float:
    """P(T >= t) under Student t with n-1 degrees of freedom."""
    if n < 2 or not math.isfinite(t_stat):
        return 0.0 if t_stat > 0 else 1.0
    return float(student_t.sf(t_stat, n - 1))


def compare_to_mean_shape(recons, truths, mean_vol: OccupancyVolume,
                          ids=None) -> MetricReport:
    """Per-sample DICE/AVDist for reconstructions and the mean-shape baseline
    against the same truths, with one-tailed paired t statistics for the
    improvement over the baseline."""
    if len(recons) != len(truths):
        raise ValueError("recons and truths must align")
    if ids is None:
        ids = [f"{i:04d}" for i in range(len(recons))]
    rows, base_rows = [], []
    for sid, r, t in zip(ids, recons, truths):
        rows.append((sid, dice(r, t), avdist(r, t)))
        base_rows.append((sid, dice(mean_vol, t), avdist(mean_vol, t)))
    r_dice = np.array([r[1] for r in rows])
    r_av = np.array([r[2] for r in rows])
    b_dice = np.array([r[1] for r in base_rows])
    b_av = np.array([r[2] for r in base_rows])
    t_dice = paired_t_statistic(r_dice - b_dice)
    t_av = paired_t_statistic(b_av - r_av)
    n = len(rows)
    return MetricReport(
        dice=float(r_dice.mean()), avdist_mm=float(r_av.mean()),
        per_sample=rows,
        baseline={"dice": float(b_dice.mean()), "avdist_mm": float(b_av.mean()),
                  "per_sample": base_rows},
        t_dice=t_dice, p_dice=one_tailed_p(t_dice, n),
        t_avdist=t_av, p_avdist=one_tailed_p(t_av, n),
    )
