"""Evaluation metrics: normalized uniformity coefficient and surface deviation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, EmptyMesh
from .geom.closest import closest_points_on_mesh
from .geom.geodesic import geodesic_from_points
from .geom.mesh import Mesh
from .geom.sampling import sample_surface

DEFAULT_DISKS = 9000
DEFAULT_P = (0.002, 0.004, 0.006, 0.008, 0.010, 0.012)


@dataclass
class NucReport:
    p: float
    D: int
    avg: float
    nuc: float
    per_object_counts: list = field(default_factory=list)


@dataclass
class DeviationReport:
    mean: float
    std: float
    per_point: np.ndarray | None = None


def disk_radius(p: float, area: float) -> float:
    """Radius of a flat disk covering fraction ``p`` of ``area``."""
    return math.sqrt(p * area / math.pi)


def _check(cloud, mesh):
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        raise EmptyCloud("metric needs a nonempty point cloud")
    if mesh.n_triangles == 0:
        raise EmptyMesh("metric needs a nonempty mesh")
    return cloud


def disk_counts(cloud, mesh: Mesh, p: float, D: int, seed=None, chunk: int = 512):
    """Number of points inside each of ``D`` random geodesic disks.

    Disk centres are uniform over the surface.  Points are projected to their
    closest surface location; the geodesic distance between a centre and a
    projected point is approximated through the vertex graph, entering and
    leaving it along straight segments to the corners of the respective
    triangles (or directly when both share a triangle).
    """
    cloud = _check(cloud, mesh)
    rd = disk_radius(p, mesh.area)
    seeds, seed_tri = sample_surface(mesh, D, "montecarlo", seed, return_triangles=True)
    foot, _, pt_tri = closest_points_on_mesh(mesh, cloud)
    corners = mesh.triangles[pt_tri]  # (P, 3)
    offset = np.linalg.norm(mesh.vertices[corners] - foot[:, None, :], axis=2)
    counts = np.empty(D, dtype=np.int64)
    for s in range(0, D, chunk):
        sl = slice(s, min(D, s + chunk))
        dv = geodesic_from_points(mesh, seeds[sl], seed_tri[sl], limit=rd)
        g = (dv[:, corners] + offset[None]).min(axis=2)
        same = seed_tri[sl, None] == pt_tri[None, :]
        if same.any():
            direct = np.linalg.norm(seeds[sl, None, :] - foot[None, :, :], axis=2)
            g = np.where(same, np.minimum(g, direct), g)
        counts[sl] = (g <= rd).sum(axis=1)
    return counts


def nuc_from_counts(counts_per_object, totals, p: float):
    """``(avg, nuc)`` from per-disk counts of each object and its point total."""
    ratios = np.concatenate(
        [np.asarray(c, dtype=np.float64) / (n * p) for c, n in zip(counts_per_object, totals)]
    )
    avg = float(ratios.mean())
    return avg, float(np.sqrt(np.mean((ratios - avg) ** 2)))


def nuc(objects, p: float, D: int = DEFAULT_DISKS, seed=0, count_fn=None) -> NucReport:
    """Normalized uniformity coefficient over ``(cloud, mesh)`` pairs.

    ``count_fn(cloud, mesh, p, D, seed)`` may replace the geodesic disk counter.
    Object ``k`` draws its disks from seed ``(*seed, k)``; ``seed`` may be an
    integer or a sequence of integers.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    count_fn = count_fn or disk_counts
    counts, totals = [], []
    for k, (cloud, mesh) in enumerate(objects):
        cloud = _check(cloud, mesh)
        counts.append(np.asarray(count_fn(cloud, mesh, p, D, np.random.default_rng([*np.atleast_1d(seed).tolist(), k]))))
        totals.append(len(cloud))
    if not counts:
        raise EmptyCloud("nuc needs at least one object")
    avg, value = nuc_from_counts(counts, totals, p)
    return NucReport(p=p, D=D, avg=avg, nuc=value, per_object_counts=counts)


def deviation(pred, mesh: Mesh, keep_per_point=False) -> DeviationReport:
    """Mean and population standard deviation of point-to-surface distances."""
    pred = _check(pred, mesh)
    _, dist, _ = closest_points_on_mesh(mesh, pred)
    return DeviationReport(
        mean=float(dist.mean()),
        std=float(dist.std()),
        per_point=dist if keep_per_point else None,
    )
