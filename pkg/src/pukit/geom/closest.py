"""Exact closest-point queries against triangle meshes."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyMesh
from .mesh import Mesh


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangle ``abc`` to ``p``, vectorised over rows.

    Classifies ``p`` against the vertex, edge and face Voronoi regions of the
    triangle (Ericson, Real-Time Collision Detection, 5.1.5).
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[..., None] + ac * w[..., None]

        # regions applied in reverse test order so earlier tests win
        in_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(in_bc[..., None], b + (c - b) * t[..., None], out)

        in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        out = np.where(in_ac[..., None], a + ac * t[..., None], out)

        out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)

        in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        out = np.where(in_ab[..., None], a + ab * t[..., None], out)

    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


@lru_cache(maxsize=8)
def _bounds(mesh: Mesh):
    corners = mesh.corners
    centroids = corners.mean(axis=1)
    radii = np.linalg.norm(corners - centroids[:, None, :], axis=2).max(axis=1)
    return cKDTree(centroids), centroids, radii


def closest_points_on_mesh(mesh: Mesh, points, chunk: int = 4096):
    """Closest surface point for every query point.

    Returns ``(closest (n, 3), distance (n,), triangle (n,))``.  Triangles are
    bounded by spheres around their centroids; a k-d tree over the centroids
    prunes every triangle that provably cannot beat the best distance found
    so far, so the answer is the same as the brute-force minimum (ties go to
    the lower triangle index).
    """
    if mesh.n_triangles == 0:
        raise EmptyMesh("closest point on an empty mesh")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tree, centroids, radii = _bounds(mesh)
    corners = mesh.corners
    r_max = float(radii.max())
    n = len(points)
    best_q = np.empty((n, 3))
    best_d = np.empty(n)
    best_t = np.empty(n, dtype=np.int64)

    k0 = min(4, mesh.n_triangles)
    for s in range(0, n, chunk):
        p = points[s : s + chunk]
        _, near = tree.query(p, k=k0)
        near = near.reshape(len(p), k0)
        q = closest_point_on_triangles(
            p[:, None, :], corners[near, 0], corners[near, 1], corners[near, 2]
        )
        upper = np.linalg.norm(q - p[:, None, :], axis=2).min(axis=1)

        lists = tree.query_ball_point(p, upper + r_max + 1e-12)
        counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(p))
        rows = np.repeat(np.arange(len(p)), counts)
        tris = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
        gap = np.linalg.norm(p[rows] - centroids[tris], axis=1) - radii[tris]
        ok = gap <= upper[rows] + 1e-12
        rows, tris = rows[ok], tris[ok]
        order = np.lexsort((tris, rows))
        rows, tris = rows[order], tris[order]

        cand = closest_point_on_triangles(
            p[rows], corners[tris, 0], corners[tris, 1], corners[tris, 2]
        )
        dist = np.linalg.norm(p[rows] - cand, axis=1)
        # per-row argmin; lexsort on distance keeps lower triangle index first
        pick = np.lexsort((tris, dist, rows))
        first = np.ones(len(pick), dtype=bool)
        first[1:] = rows[pick][1:] != rows[pick][:-1]
        pick = pick[first]
        r = rows[pick]
        best_q[s + r] = cand[pick]
        best_d[s + r] = dist[pick]
        best_t[s + r] = tris[pick]
    return best_q, best_d, best_t


def closest_point_on_mesh(mesh: Mesh, point):
    """Single-point form of :func:`closest_points_on_mesh`."""
    q, d, t = closest_points_on_mesh(mesh, np.asarray(point, dtype=np.float64)[None])
    return q[0], float(d[0]), int(t[0])
