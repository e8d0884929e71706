"""Shared fixtures and independent reference implementations (oracles).

The oracles deliberately use naive O(n^2) / exhaustive formulations so they
share no code with the package under test.
"""

import numpy as np
import pytest

from lareco.grid import GridSpec, OccupancyVolume


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def boundary_bruteforce(data: np.ndarray) -> np.ndarray:
    """True voxels with >= 1 false 6-neighbor; grid faces count as false."""
    nx, ny, nz = data.shape
    out = np.zeros_like(data)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not data[i, j, k]:
                    continue
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + di, j + dj, k + dk
                    if not (0 <= a < nx and 0 <= b < ny and 0 <= c < nz):
                        out[i, j, k] = True
                        break
                    if not data[a, b, c]:
                        out[i, j, k] = True
                        break
    return out


def sdt_bruteforce_sq(data: np.ndarray) -> np.ndarray:
    """Signed squared Euclidean distance (voxel units) to the nearest
    boundary voxel: 0 on the boundary, positive inside, negative outside."""
    boundary = np.argwhere(boundary_bruteforce(data))
    assert len(boundary) > 0
    coords = np.argwhere(np.ones_like(data))
    diff = coords[:, None, :] - boundary[None, :, :]
    d2 = (diff * diff).sum(axis=2).min(axis=1).reshape(data.shape)
    sign = np.where(data, 1, -1)
    sign[boundary_bruteforce(data)] = 0
    return d2 * sign


def dijkstra_oracle_cost(mask: np.ndarray, weight: np.ndarray,
                         s: tuple, t: tuple) -> float:
    """All-pairs shortest path by Floyd-Warshall over the true voxels with
    edge cost = mean of endpoint weights."""
    nodes = [tuple(v) for v in np.argwhere(mask)]
    index = {v: i for i, v in enumerate(nodes)}
    n = len(nodes)
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for v in nodes:
        for off in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            u = (v[0] + off[0], v[1] + off[1], v[2] + off[2])
            if u in index:
                c = 0.5 * (weight[v] + weight[u])
                i, j = index[v], index[u]
                dist[i, j] = dist[j, i] = min(dist[i, j], c)
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    return float(dist[index[s], index[t]])


def bellman_ford_cost(mask: np.ndarray, weight: np.ndarray,
                      s: tuple, t: tuple) -> float:
    """Exhaustive label-correcting relaxation over all edges until fixpoint.

    Costs accumulate left to right (dist[u] + edge), the same fold order the
    routed paths use, so the optimum is comparable bit for bit.
    """
    nodes = [tuple(v) for v in np.argwhere(mask)]
    index = {v: i for i, v in enumerate(nodes)}
    edges = []
    for v in nodes:
        for off in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                    (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            u = (v[0] + off[0], v[1] + off[1], v[2] + off[2])
            if u in index:
                edges.append((index[v], index[u], 0.5 * (weight[v] + weight[u])))
    dist = [float("inf")] * len(nodes)
    dist[index[s]] = 0.0
    for _ in range(len(nodes)):
        changed = False
        for a, b, c in edges:
            if dist[a] + c < dist[b]:
                dist[b] = dist[a] + c
                changed = True
        if not changed:
            break
    return dist[index[t]]


def dice_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    inter = 0
    na = nb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        na += bool(x)
        nb += bool(y)
        inter += bool(x) and bool(y)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def avdist_bruteforce(a: np.ndarray, b: np.ndarray, spacing: float) -> float:
    """Symmetric mean nearest-boundary distance via an all-pairs scan."""
    ba = np.argwhere(boundary_bruteforce(a)).astype(float)
    bb = np.argwhere(boundary_bruteforce(b)).astype(float)
    assert len(ba) and len(bb)

    def directed(src, dst):
        total = 0.0
        for p in src:
            best = min(float(np.sum((p - q) ** 2)) for q in dst)
            total += np.sqrt(best)
        return total / len(src)

    return (0.5 * directed(ba, bb) + 0.5 * directed(bb, ba)) * spacing


def random_volume(rng: np.random.Generator, dims, p: float = 0.5) -> np.ndarray:
    """Random occupancy that is neither all-true nor all-false."""
    while True:
        data = rng.random(dims) < p
        if data.any() and not data.all():
            return data


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------

def gradient_errors(model, X, Y, weights, cfg, mask_seed: int,
                    h: float = 1e-5) -> dict:
    """Per-tensor relative error between the analytic gradient and a central
    finite difference of the training loss.

    Relative error is ||g_a - g_n|| / max(||g_a||, ||g_n||).  When both norms
    are below 1e-6 the gradient is zero by both accounts (e.g. encoder biases,
    which batch normalization cancels analytically) and the error is reported
    as 0 rather than comparing finite-difference noise against itself.
    """
    from lareco import ded

    def run_loss():
        rng = np.random.default_rng(mask_seed)
        z, cache = ded.forward(model, X, mode="train", rng=rng,
                               input_mask_prob=cfg.input_mask_prob)
        total, _ = ded.loss(z, Y, weights, cfg, model)
        return total, z, cache

    _, z, cache = run_loss()
    analytic = ded.backward(model, cache, z, Y, weights, cfg)
    errors = {}
    for name, p in model.params().items():
        ga = analytic[name]
        gn = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = gn.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi, _, _ = run_loss()
            flat[i] = orig - h
            lo, _, _ = run_loss()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        denom = max(np.linalg.norm(ga), np.linalg.norm(gn))
        errors[name] = 0.0 if denom < 1e-6 else float(np.linalg.norm(ga - gn) / denom)
    return errors


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid8():
    return GridSpec.centered(8, 1.0)


@pytest.fixture
def blob8(grid8):
    """Solid ball occupancy on the 8^3 unit grid."""
    idx = np.stack(np.meshgrid(*[np.arange(8)] * 3, indexing="ij"), axis=-1)
    centers = grid8.world(idx.reshape(-1, 3))
    data = (np.linalg.norm(centers, axis=1) <= 2.6).reshape(grid8.dims)
    return OccupancyVolume(grid8, data)
