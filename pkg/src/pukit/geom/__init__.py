"""Mesh and point-cloud geometry kernels."""

from .closest import closest_point_on_mesh, closest_point_on_triangles, closest_points_on_mesh
from .geodesic import geodesic_distances, geodesic_from_points
from .mesh import (
    Mesh,
    clean_mesh,
    icosphere,
    load_mesh,
    load_points,
    save_mesh_off,
    save_points,
    save_points_ply,
    save_points_xyz,
)
from .neighbors import (
    NeighborResult,
    as_cloud,
    ball_query,
    ball_query_batch,
    farthest_point_sample,
    farthest_point_sample_batch,
    knn,
    knn_batch,
    knn_self,
)
from .patch import Patch, extract_patch, normalize_points, patch_submesh
from .sampling import eliminate_samples, sample_surface

__all__ = [
    "Mesh",
    "NeighborResult",
    "Patch",
    "as_cloud",
    "ball_query",
    "ball_query_batch",
    "clean_mesh",
    "closest_point_on_mesh",
    "closest_point_on_triangles",
    "closest_points_on_mesh",
    "eliminate_samples",
    "extract_patch",
    "farthest_point_sample",
    "farthest_point_sample_batch",
    "geodesic_distances",
    "geodesic_from_points",
    "icosphere",
    "knn",
    "knn_batch",
    "knn_self",
    "load_mesh",
    "load_points",
    "normalize_points",
    "patch_submesh",
    "sample_surface",
    "save_mesh_off",
    "save_points",
    "save_points_ply",
    "save_points_xyz",
]
