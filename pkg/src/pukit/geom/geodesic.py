"""Graph-geodesic distances over the mesh edge graph (Dijkstra)."""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from .mesh import Mesh


def geodesic_distances(mesh: Mesh, source: int, limit: float = np.inf) -> np.ndarray:
    """Shortest edge-path length from ``source`` to every vertex.

    This approximates surface geodesics from above; vertices farther than
    ``limit`` or in another component get ``inf``.
    """
    if not 0 <= source < mesh.n_vertices:
        raise IndexError(f"source vertex {source} out of range")
    return dijkstra(mesh.adjacency, directed=False, indices=int(source), limit=limit)


def geodesic_from_points(mesh: Mesh, points, triangles, limit: float = np.inf) -> np.ndarray:
    """Distances ``(len(points), V)`` from surface points to all vertices.

    Each point sits on a known triangle and enters the graph through a
    virtual node linked to that triangle's corners by straight segments.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64)
    v = mesh.n_vertices
    c = len(points)
    corners = mesh.triangles[triangles]
    w = np.linalg.norm(mesh.vertices[corners] - points[:, None, :], axis=2)
    # zero-length links would vanish from the sparse graph
    w = np.maximum(w, 1e-300)
    virt = np.repeat(v + np.arange(c), 3)
    link = sparse.csr_matrix(
        (w.ravel(), (virt, corners.ravel())), shape=(v + c, v + c)
    )
    adj = sparse.block_diag([mesh.adjacency, sparse.csr_matrix((c, c))], format="csr")
    graph = adj + link + link.T
    d = dijkstra(graph, directed=False, indices=v + np.arange(c), limit=limit)
    return d[:, :v]
