"""Geodesic surface patches used as training ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import PatchTooSmall
from .geodesic import geodesic_distances
from .mesh import Mesh
from .sampling import _rng, sample_arrays

MIN_AREA_PER_POINT = 1e-10


@dataclass(frozen=True, eq=False)
class Patch:
    """Normalised ground-truth points of one surface patch.

    ``gt_points`` live in the unit ball; the source-space coordinates are
    ``gt_points * norm_scale + norm_center``.
    """

    gt_points: np.ndarray
    seed_index: int
    geodesic_radius: float
    norm_center: np.ndarray
    norm_scale: float

    def denormalize(self, points) -> np.ndarray:
        return np.asarray(points) * self.norm_scale + self.norm_center

    def normalize(self, points) -> np.ndarray:
        return (np.asarray(points) - self.norm_center) / self.norm_scale


def normalize_points(points):
    """Centroid-centre and scale into the unit ball; returns ``(pts, center, scale)``."""
    points = np.asarray(points, dtype=np.float64)
    center = points.mean(axis=0)
    shifted = points - center
    scale = float(np.sqrt((shifted**2).sum(axis=1)).max())
    if not scale > 0:
        scale = 1.0
    return shifted / scale, center, scale


def patch_submesh(mesh: Mesh, seed: int, d: float) -> Mesh | None:
    """Triangles whose three corners are within graph-geodesic ``d`` of ``seed``."""
    dist = geodesic_distances(mesh, seed, limit=d)
    inside = np.all(dist[mesh.triangles] <= d, axis=1)
    if not inside.any():
        return None
    return mesh.submesh(inside)


def extract_patch(mesh: Mesh, seed: int, d: float, n_hat: int, rng=None) -> Patch:
    """Grow a geodesic disk of radius ``d`` around vertex ``seed`` and sample it.

    ``n_hat`` blue-noise points are drawn on the sub-mesh and normalised into
    the unit ball.
    """
    sub = patch_submesh(mesh, seed, d)
    if sub is None:
        raise PatchTooSmall(f"no triangle within geodesic distance {d} of vertex {seed}")
    if sub.area < n_hat * MIN_AREA_PER_POINT:
        raise PatchTooSmall(
            f"patch area {sub.area:.3g} too small for {n_hat} points around vertex {seed}"
        )
    pts = sample_arrays(sub.vertices, sub.triangles, n_hat, "poisson", _rng(rng))
    normed, center, scale = normalize_points(pts)
    return Patch(
        gt_points=normed,
        seed_index=int(seed),
        geodesic_radius=float(d),
        norm_center=center,
        norm_scale=scale,
    )
