"""Neighborhood queries on point clouds.

The single-query functions (:func:`knn`, :func:`ball_query`) are exact with
deterministic lower-index tie breaking.  The ``*_batch`` variants serve the
network and the losses; they use a k-d tree and agree with the exact versions
whenever distances are distinct.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyCloud, KTooLarge, MTooLarge


class NeighborResult(NamedTuple):
    indices: np.ndarray
    distances: np.ndarray


def as_cloud(points) -> np.ndarray:
    """Validate and return an ``(n, 3)`` float array of finite points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def _sorted_by_distance(cloud, query):
    d = np.sqrt(((cloud - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    return order, d[order]


def knn(cloud, query, k: int) -> NeighborResult:
    """The ``k`` nearest points of ``cloud`` to ``query``, nearest first."""
    cloud = as_cloud(cloud)
    if k > len(cloud):
        raise KTooLarge(f"k={k} exceeds cloud size {len(cloud)}")
    order, d = _sorted_by_distance(cloud, query)
    return NeighborResult(order[:k], d[:k])


def ball_query(cloud, center, radius: float, max_samples: int) -> NeighborResult:
    """Fixed-size group of points within ``radius`` of ``center``.

    Up to ``max_samples`` in-radius points are returned nearest-first; shorter
    groups are padded by cycling through the found indices.  An empty ball
    falls back to the single nearest point.
    """
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        raise EmptyCloud("ball query on an empty cloud")
    if radius <= 0 or max_samples < 1:
        raise ValueError("radius must be positive and max_samples >= 1")
    order, d = _sorted_by_distance(cloud, center)
    found = max(1, min(int(np.searchsorted(d, radius, side="right")), max_samples))
    pick = np.arange(max_samples) % found
    return NeighborResult(order[pick], d[pick])


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices beginning at ``start``."""
    cloud = as_cloud(cloud)
    if m > len(cloud):
        raise MTooLarge(f"m={m} exceeds cloud size {len(cloud)}")
    if m < 1:
        raise ValueError("m must be at least 1")
    return farthest_point_sample_batch(cloud[None], m, start)[0]


def farthest_point_sample_batch(clouds, m: int, start=0) -> np.ndarray:
    """FPS over a ``(B, n, 3)`` stack; ``start`` is a scalar or per-cloud index."""
    clouds = np.asarray(clouds, dtype=np.float64)
    b, n, _ = clouds.shape
    if m > n:
        raise MTooLarge(f"m={m} exceeds cloud size {n}")
    rows = np.arange(b)
    picks = np.empty((b, m), dtype=np.int64)
    picks[:, 0] = np.broadcast_to(np.asarray(start, dtype=np.int64), (b,))
    mind = np.full((b, n), np.inf)
    for j in range(1, m):
        last = clouds[rows, picks[:, j - 1]]
        d = np.sqrt(((clouds - last[:, None, :]) ** 2).sum(axis=2))
        np.minimum(mind, d, out=mind)
        picks[:, j] = np.argmax(mind, axis=1)
    return picks


def ball_query_batch(cloud, centers, radius: float, max_samples: int) -> np.ndarray:
    """Group indices ``(K, max_samples)`` for many centers at once."""
    cloud = np.asarray(cloud, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    k = min(max_samples, len(cloud))
    tree = cKDTree(cloud)
    d, idx = tree.query(centers, k=k, distance_upper_bound=radius)
    d = d.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)
    found = np.isfinite(d).sum(axis=1)
    empty = found == 0
    if np.any(empty):
        _, nearest = tree.query(centers[empty], k=1)
        idx[empty, 0] = nearest
        found[empty] = 1
    cols = np.arange(max_samples)[None, :] % found[:, None]
    return np.take_along_axis(idx, cols, axis=1)


def knn_batch(cloud, queries, k: int) -> NeighborResult:
    """k nearest neighbours of each query point, ``(Q, k)`` arrays."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if k > len(cloud):
        raise KTooLarge(f"k={k} exceeds cloud size {len(cloud)}")
    d, idx = cKDTree(cloud).query(np.asarray(queries, dtype=np.float64), k=k)
    return NeighborResult(idx.reshape(-1, k), d.reshape(-1, k))


def knn_self(points, k: int) -> NeighborResult:
    """k nearest neighbours of every point within its own cloud, self excluded."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k + 1 > n:
        raise KTooLarge(f"k={k} needs at least {k + 1} points, got {n}")
    d, idx = cKDTree(points).query(points, k=k + 1)
    is_self = idx == np.arange(n)[:, None]
    # drop self where reported, otherwise (duplicates) drop the farthest slot
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = np.ones_like(is_self)
    keep[np.arange(n), drop] = False
    return NeighborResult(idx[keep].reshape(n, k), d[keep].reshape(n, k))
