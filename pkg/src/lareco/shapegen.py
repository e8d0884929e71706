"""Simplified parametric left-atrium generator: an implicit blend of an
ellipsoid body, four pulmonary-vein capsules and an appendage capsule, warped
by a divergence-free sinusoidal displacement field, with parameters drawn from
a multivariate normal and filtered by a Mahalanobis acceptance score.

This is an explicit stand-in for a proprietary statistical shape model; the
rest of the pipeline depends only on its contract (occupancy volume + surface
mesh + ground-truth landmarks per sample).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage
from scipy.stats import chi2

from .errors import OutOfExtent, RejectionExhausted
from .grid import STRUCT_6, GridSpec, OccupancyVolume, ScalarField, marching_cubes
from .mesh import Landmarks, TriMesh

# parameter vector layout (warp_seed is assigned per sample, not sampled)
PARAM_NAMES = (
    ["body_radius_x", "body_radius_y", "body_radius_z"]
    + [f"pv_{pv}_dir_{ax}" for pv in ("ls", "li", "ri", "rs") for ax in "xyz"]
    + [f"pv_{pv}_radius" for pv in ("ls", "li", "ri", "rs")]
    + [f"pv_{pv}_length" for pv in ("ls", "li", "ri", "rs")]
    + ["appendage_dir_x", "appendage_dir_y", "appendage_dir_z"]
    + ["appendage_radius", "appendage_length", "warp_amp"]
)
N_PARAMS = len(PARAM_NAMES)  # 29

PV_RADIUS_RANGE = (3.0, 12.0)
MIN_PV_ANGLE_DEG = 20.0
BLEND_K_MM = 4.0


@dataclass(frozen=True)
class AtriumParams:
    body_radii_mm: np.ndarray      # (3,)
    pv_dir: np.ndarray             # (4, 3) unit rows, order LS LI RI RS
    pv_radius_mm: np.ndarray       # (4,)
    pv_length_mm: np.ndarray       # (4,)
    appendage_dir: np.ndarray      # (3,) unit
    appendage_radius_mm: float
    appendage_length_mm: float
    warp_amp_mm: float
    warp_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "body_radii_mm", np.asarray(self.body_radii_mm, dtype=float).reshape(3))
        object.__setattr__(self, "pv_dir", np.asarray(self.pv_dir, dtype=float).reshape(4, 3))
        object.__setattr__(self, "pv_radius_mm", np.asarray(self.pv_radius_mm, dtype=float).reshape(4))
        object.__setattr__(self, "pv_length_mm", np.asarray(self.pv_length_mm, dtype=float).reshape(4))
        object.__setattr__(self, "appendage_dir", np.asarray(self.appendage_dir, dtype=float).reshape(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.body_radii_mm,
            self.pv_dir.ravel(),
            self.pv_radius_mm,
            self.pv_length_mm,
            self.appendage_dir,
            [self.appendage_radius_mm, self.appendage_length_mm, self.warp_amp_mm],
        ])

    @staticmethod
    def from_vector(vec, warp_seed: int = 0) -> "AtriumParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_PARAMS,):
            raise ValueError(f"parameter vector must have length {N_PARAMS}")
        pv_dir = vec[3:15].reshape(4, 3)
        pv_dir = pv_dir / np.linalg.norm(pv_dir, axis=1, keepdims=True)
        app_dir = vec[23:26]
        app_dir = app_dir / np.linalg.norm(app_dir)
        return AtriumParams(
            body_radii_mm=vec[0:3],
            pv_dir=pv_dir,
            pv_radius_mm=vec[15:19],
            pv_length_mm=vec[19:23],
            appendage_dir=app_dir,
            appendage_radius_mm=float(vec[26]),
            appendage_length_mm=float(vec[27]),
            warp_amp_mm=float(vec[28]),
            warp_seed=warp_seed,
        )

    def invariant_violation(self) -> str | None:
        """Message describing the first violated invariant, or None if valid."""
        if np.any(self.body_radii_mm <= 0):
            return "non-positive body radius"
        lo, hi = PV_RADIUS_RANGE
        if np.any(self.pv_radius_mm < lo) or np.any(self.pv_radius_mm > hi):
            return f"pv radius outside [{lo}, {hi}]"
        if np.any(self.pv_length_mm < 0):
            return "negative pv length"
        if self.appendage_radius_mm <= 0 or self.appendage_length_mm < 0:
            return "invalid appendage size"
        if self.warp_amp_mm < 0:
            return "negative warp amplitude"
        min_cos = math.cos(math.radians(MIN_PV_ANGLE_DEG))
        for i in range(4):
            for j in range(i + 1, 4):
                if self.pv_dir[i] @ self.pv_dir[j] > min_cos:
                    return f"pv directions {i},{j} closer than {MIN_PV_ANGLE_DEG} deg"
        return None


@dataclass(frozen=True)
class MvnSpec:
    """Multivariate normal over the parameter vector plus an acceptance bound
    on the Mahalanobis distance."""

    mean: np.ndarray
    covariance: np.ndarray
    accept_threshold: float

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        c = np.asarray(self.covariance, dtype=float)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", c)
        if c.shape != (len(m), len(m)):
            raise ValueError("covariance shape does not match mean")
        if np.abs(c - c.T).max() > 1e-9:
            raise ValueError("covariance not symmetric")
        ev = np.linalg.eigvalsh((c + c.T) / 2.0)
        if ev.min() < -1e-9:
            raise ValueError("covariance not positive semidefinite")

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "param_names": list(PARAM_NAMES),
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "accept_threshold": self.accept_threshold,
        }

    @staticmethod
    def from_dict(d: dict) -> "MvnSpec":
        return MvnSpec(np.asarray(d["mean"]), np.asarray(d["covariance"]),
                       float(d["accept_threshold"]))


def load_mvn_spec(path=None) -> MvnSpec:
    """Load an MvnSpec JSON file; with no path, the packaged default."""
    if path is None:
        text = resources.files("lareco.data").joinpath("default_mvn.json").read_text()
    else:
        with open(path) as f:
            text = f.read()
    return MvnSpec.from_dict(json.loads(text))


def default_mvn_spec() -> MvnSpec:
    """Hand-tuned default model for the 24^3 / 4 mm desk-scale grid."""
    mean = AtriumParams(
        body_radii_mm=[20.0, 17.0, 15.0],
        pv_dir=[[-0.60, 0.60, 0.50],
                [-0.65, 0.60, -0.45],
                [0.65, 0.60, -0.45],
                [0.60, 0.60, 0.50]],
        pv_radius_mm=[7.0, 7.0, 7.0, 7.0],
        pv_length_mm=[11.0, 11.0, 11.0, 11.0],
        appendage_dir=[-0.70, -0.60, 0.25],
        appendage_radius_mm=6.5,
        appendage_length_mm=8.0,
        warp_amp_mm=2.5,
    ).to_vector()
    # normalize the direction blocks stored in the mean
    mean[3:15] = (mean[3:15].reshape(4, 3)
                  / np.linalg.norm(mean[3:15].reshape(4, 3), axis=1, keepdims=True)).ravel()
    mean[23:26] /= np.linalg.norm(mean[23:26])
    sigma = np.concatenate([
        [2.5, 2.5, 2.5],          # body radii
        np.full(12, 0.12),        # pv directions
        np.full(4, 0.8),          # pv radii
        np.full(4, 2.5),          # pv lengths
        np.full(3, 0.10),         # appendage direction
        [0.8, 2.0, 0.8],          # appendage radius/length, warp amplitude
    ])
    cov = np.diag(sigma ** 2)
    threshold = float(math.sqrt(chi2.ppf(0.975, N_PARAMS)))
    return MvnSpec(mean, cov, threshold)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

_EV_FLOOR = 1e-12


def sample_params(spec: MvnSpec, rng: np.random.Generator,
                  max_attempts: int = 1000) -> AtriumParams:
    """Draw from N(mean, covariance); reject draws whose Mahalanobis distance
    exceeds the acceptance threshold or that violate parameter invariants."""
    ev, vecs = np.linalg.eigh((spec.covariance + spec.covariance.T) / 2.0)
    active = ev > _EV_FLOOR
    scale = np.sqrt(ev[active])
    basis = vecs[:, active]
    for _ in range(max_attempts):
        z = rng.standard_normal(active.sum())
        if np.linalg.norm(z) > spec.accept_threshold:
            continue
        vec = spec.mean + basis @ (scale * z)
        params = AtriumParams.from_vector(vec)
        if params.invariant_violation() is None:
            return params
    raise RejectionExhausted(f"no acceptable sample in {max_attempts} draws")


# ---------------------------------------------------------------------------
# Implicit shape
# ---------------------------------------------------------------------------

def _ellipsoid_surface_point(radii: np.ndarray, direction: np.ndarray) -> np.ndarray:
    t = 1.0 / math.sqrt(float(np.sum((direction / radii) ** 2)))
    return t * direction


def _capsules(params: AtriumParams) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """(segment start, segment end, radius) for each tube primitive.
    Zero-length tubes are omitted so the shape degenerates to the bare body."""
    caps = []
    for i in range(4):
        if params.pv_length_mm[i] <= 0:
            continue
        d = params.pv_dir[i]
        a = 0.85 * _ellipsoid_surface_point(params.body_radii_mm, d)
        caps.append((a, a + d * params.pv_length_mm[i], float(params.pv_radius_mm[i])))
    if params.appendage_length_mm > 0:
        d = params.appendage_dir
        a = 0.85 * _ellipsoid_surface_point(params.body_radii_mm, d)
        caps.append((a, a + d * params.appendage_length_mm, params.appendage_radius_mm))
    return caps


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(float(ab @ ab), 1e-300), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)


def implicit_unwarped(params: AtriumParams, pts: np.ndarray) -> np.ndarray:
    """Smooth-min union of the body ellipsoid and capsule distance fields, in
    mm; negative inside.  Exact sign for the bare ellipsoid."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    r = params.body_radii_mm
    body = (np.linalg.norm(pts / r, axis=1) - 1.0) * float(r.min())
    fields = [body]
    for a, b, rad in _capsules(params):
        fields.append(_segment_distance(pts, a, b) - rad)
    f = np.stack(fields)
    if len(fields) == 1:
        return f[0]
    m = f.min(axis=0)
    return m - BLEND_K_MM * np.log(np.exp(-(f - m) / BLEND_K_MM).sum(axis=0))


def warp_displacement(params: AtriumParams, pts: np.ndarray) -> np.ndarray:
    """Divergence-free displacement: sum of transverse sinusoidal plane waves
    over 3 octaves, seeded by warp_seed, peak amplitude <= warp_amp_mm."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if params.warp_amp_mm == 0:
        return np.zeros_like(pts)
    rng = np.random.default_rng(params.warp_seed)
    wavelengths = (90.0, 45.0, 22.5)
    octave_amp = np.array([0.55, 0.30, 0.15]) * params.warp_amp_mm
    disp = np.zeros_like(pts)
    for lam, amp in zip(wavelengths, octave_amp):
        for _ in range(2):
            k = rng.standard_normal(3)
            k /= np.linalg.norm(k)
            e = rng.standard_normal(3)
            e -= (e @ k) * k  # transverse => divergence free
            e /= np.linalg.norm(e)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            disp += (amp / 2.0) * np.outer(np.sin(2.0 * math.pi / lam * (pts @ k) + phase), e)
    return disp


def implicit_warped(params: AtriumParams, pts: np.ndarray) -> np.ndarray:
    """Implicit value after warping: f(p + d(p))."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return implicit_unwarped(params, pts + warp_displacement(params, pts))


def _unwarp_point(params: AtriumParams, q: np.ndarray, iters: int = 30) -> np.ndarray:
    """Solve l + d(l) = q by fixed point iteration (d is a small, smooth field)."""
    l = q.copy()
    for _ in range(iters):
        l = q - warp_displacement(params, l[None, :])[0]
    return l


def landmarks_of(params: AtriumParams) -> Landmarks:
    """Ground-truth landmarks: warped PV tube-tip surface points plus a septal
    surface point on the body opposite the mean PV direction."""
    pts = []
    for i in range(4):
        d = params.pv_dir[i]
        a = 0.85 * _ellipsoid_surface_point(params.body_radii_mm, d)
        tip = a + d * (params.pv_length_mm[i] + params.pv_radius_mm[i])
        pts.append(_unwarp_point(params, tip))
    s_dir = -params.pv_dir.mean(axis=0)
    s_dir /= np.linalg.norm(s_dir)
    septum = _unwarp_point(params, _ellipsoid_surface_point(params.body_radii_mm, s_dir))
    return Landmarks(pts[0], pts[1], pts[2], pts[3], septum)


def build_atrium(params: AtriumParams, grid: GridSpec) -> tuple[OccupancyVolume, TriMesh, Landmarks]:
    """Sample the warped implicit on the grid, mesh it at the zero level, and
    emit ground-truth landmarks."""
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in grid.dims], indexing="ij"), axis=-1)
    centers = grid.world(idx.reshape(-1, 3))
    f = implicit_warped(params, centers).reshape(grid.dims)
    occ = f <= 0.0
    if touches_grid_face(occ):
        raise OutOfExtent("warped shape reaches the grid face")
    vol = OccupancyVolume(grid, occ)
    mesh = marching_cubes(ScalarField(grid, -f), 0.0)
    return vol, mesh, landmarks_of(params)


def touches_grid_face(occ: np.ndarray) -> bool:
    return bool(occ[0].any() or occ[-1].any() or occ[:, 0].any() or occ[:, -1].any()
                or occ[:, :, 0].any() or occ[:, :, -1].any())


def is_single_component(occ: np.ndarray) -> bool:
    if not occ.any():
        return False
    _, n = ndimage.label(occ, structure=STRUCT_6)
    return n == 1


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def generate_dataset(spec: MvnSpec, grid: GridSpec, n: int, seed: int,
                     max_attempts_per_sample: int = 1000):
    """Deterministically generate n accepted samples.

    Returns (samples, manifest): samples is a list of
    (OccupancyVolume, TriMesh, Landmarks, AtriumParams) and manifest records
    the distribution hash, grid, seed and per-sample seeds.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n)
    samples = []
    entries = []
    used_warp_seeds = set()
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        sample = None
        for _ in range(max_attempts_per_sample):
            params = sample_params(spec, rng)
            warp_seed = int(rng.integers(0, 2 ** 31))
            while warp_seed in used_warp_seeds:
                warp_seed = int(rng.integers(0, 2 ** 31))
            params = AtriumParams.from_vector(params.to_vector(), warp_seed=warp_seed)
            try:
                vol, mesh, lms = build_atrium(params, grid)
            except OutOfExtent:
                continue
            if not is_single_component(vol.data):
                continue
            used_warp_seeds.add(warp_seed)
            sample = (vol, mesh, lms, params)
            break
        if sample is None:
            raise RejectionExhausted(f"sample {i}: no valid shape in "
                                     f"{max_attempts_per_sample} attempts")
        samples.append(sample)
        entries.append({"id": f"{i:04d}", "warp_seed": sample[3].warp_seed,
                        "entropy": str(ss.entropy)})
    manifest = {
        "spec_sha256": spec.sha256(),
        "grid": {"dims": list(grid.dims), "spacing_mm": grid.spacing_mm,
                 "origin_mm": list(grid.origin_mm)},
        "seed": seed,
        "samples": entries,
    }
    return samples, manifest
