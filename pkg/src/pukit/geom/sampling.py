"""Surface sampling: area-weighted Monte-Carlo and blue-noise sample elimination."""

from __future__ import annotations

import heapq

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyMesh
from .mesh import Mesh, triangle_areas

OVERSAMPLE = 4


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_triangles(vertices, triangles, n, rng, areas=None):
    """Area-weighted uniform samples; returns ``(points, triangle_index)``."""
    if areas is None:
        areas = triangle_areas(vertices, triangles)
    total = areas.sum()
    if len(triangles) == 0 or not total > 0:
        raise EmptyMesh("cannot sample an empty surface")
    cdf = np.cumsum(areas)
    tri = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    tri = np.minimum(tri, len(triangles) - 1)
    u = rng.random((n, 2))
    s = np.sqrt(u[:, :1])
    c = vertices[triangles[tri]]
    pts = (1 - s) * c[:, 0] + s * (1 - u[:, 1:]) * c[:, 1] + s * u[:, 1:] * c[:, 2]
    return pts, tri


def eliminate_samples(points, n: int) -> np.ndarray:
    """Indices of ``n`` survivors after greedy nearest-pair elimination.

    Repeatedly removes the point whose nearest surviving neighbour is closest
    (ties: lower index) until ``n`` remain.  Returned indices are sorted.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if n >= m:
        return np.arange(m)
    tree = cKDTree(points)
    alive = np.ones(m, dtype=bool)
    nn_dist = np.empty(m)
    nn_idx = np.empty(m, dtype=np.int64)
    rev = [[] for _ in range(m)]

    def nearest_alive(i, k=8):
        while True:
            kk = min(k, m)
            d, idx = tree.query(points[i], k=kk)
            d, idx = np.atleast_1d(d), np.atleast_1d(idx)
            for dj, j in zip(d, idx):
                if j != i and j < m and alive[j]:
                    return dj, j
            if kk == m:
                return np.inf, -1
            k *= 4

    d0, i0 = tree.query(points, k=min(m, 9))
    for i in range(m):
        for dj, j in zip(d0[i], i0[i]):
            if j != i:
                nn_dist[i], nn_idx[i] = dj, j
                break
        else:
            nn_dist[i], nn_idx[i] = nearest_alive(i)
        rev[nn_idx[i]].append(i)

    heap = [(nn_dist[i], i) for i in range(m)]
    heapq.heapify(heap)
    remaining = m
    while remaining > n:
        d, i = heapq.heappop(heap)
        if not alive[i] or d != nn_dist[i]:
            continue
        alive[i] = False
        remaining -= 1
        for j in rev[i]:
            if alive[j] and nn_idx[j] == i:
                nn_dist[j], nn_idx[j] = nearest_alive(j)
                if nn_idx[j] >= 0:
                    rev[nn_idx[j]].append(j)
                heapq.heappush(heap, (nn_dist[j], j))
        rev[i] = []
    return np.flatnonzero(alive)


def sample_arrays(vertices, triangles, n, mode, rng, return_triangles=False):
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    if n < 1:
        raise ValueError("n must be at least 1")
    if mode == "montecarlo":
        pts, tri = sample_triangles(vertices, triangles, n, rng)
    elif mode == "poisson":
        pts, tri = sample_triangles(vertices, triangles, OVERSAMPLE * n, rng)
        keep = eliminate_samples(pts, n)
        pts, tri = pts[keep], tri[keep]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return (pts, tri) if return_triangles else pts


def sample_surface(mesh: Mesh, n: int, mode: str = "montecarlo", seed=None,
                   return_triangles: bool = False):
    """Draw ``n`` points on ``mesh``.

    ``montecarlo`` picks triangles proportionally to area and places points
    uniformly inside them.  ``poisson`` oversamples ``4n`` Monte-Carlo points
    and thins them with :func:`eliminate_samples`, giving exactly ``n``
    well-spaced points.  Output is deterministic for a fixed ``seed``.
    """
    if mesh.n_triangles == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    return sample_arrays(mesh.vertices, mesh.triangles, n, mode, _rng(seed), return_triangles)
