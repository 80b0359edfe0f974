"""Patch datasets and the per-epoch training-pair pipeline."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DatasetEmpty, NotDivisible, ParseError, PatchTooSmall
from .geom.mesh import Mesh, icosphere
from .geom.patch import Patch, extract_patch

log = logging.getLogger(__name__)

MAGIC = b"PUPD"
VERSION = 1
DEFAULT_D_RANGE = (0.05, 0.20)  # fraction of the bounding-box diagonal
MAX_RETRIES = 10


@dataclass
class PatchDataset:
    patches: list
    n_hat: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, p in enumerate(self.patches):
            if p.gt_points.shape != (self.n_hat, 3):
                raise ValueError(f"patch {i} has shape {p.gt_points.shape}, expected ({self.n_hat}, 3)")
        per = self.meta.get("patches")
        if per is not None and len(per) != len(self.patches):
            raise ValueError("metadata does not describe every patch")

    def __len__(self):
        return len(self.patches)


@dataclass(frozen=True)
class Augmentation:
    rotation: np.ndarray  # (3, 3)
    scale: float
    shift: np.ndarray  # (3,)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), 1.0, np.zeros(3))

    def apply(self, points):
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.shift


@dataclass
class TrainSample:
    input: np.ndarray
    target: np.ndarray
    input_index: np.ndarray
    augmentation: Augmentation = field(default_factory=Augmentation.identity)


def _seed_rng(*parts):
    return np.random.default_rng([int(p) for p in parts])


def build_dataset(meshes, patches_per_mesh, d_range=DEFAULT_D_RANGE, n_hat=4096, seed=0,
                  relative=True, names=None) -> PatchDataset:
    """Crop ``patches_per_mesh`` geodesic patches from every mesh.

    With ``relative`` the radius range is a fraction of each mesh's
    bounding-box diagonal.  A seed whose patch is too small is redrawn up to
    ten times before the slot is skipped.
    """
    meshes = list(meshes)
    if not meshes:
        raise DatasetEmpty("no meshes given")
    names = list(names) if names is not None else [f"mesh{i}" for i in range(len(meshes))]
    lo, hi = map(float, d_range)
    if not 0 < lo <= hi:
        raise ValueError(f"invalid d_range {d_range}")
    patches, records = [], []
    for mi, (mesh, name) in enumerate(zip(meshes, names)):
        rng = _seed_rng(seed, mi)
        unit = mesh.bbox_diagonal() if relative else 1.0
        for slot in range(patches_per_mesh):
            for attempt in range(MAX_RETRIES + 1):
                vertex = int(rng.integers(mesh.n_vertices))
                d = float(rng.uniform(lo, hi)) * unit
                try:
                    patch = extract_patch(mesh, vertex, d, n_hat, rng)
                except PatchTooSmall as exc:
                    log.debug("%s slot %d attempt %d: %s", name, slot, attempt, exc)
                    continue
                patches.append(patch)
                records.append({"mesh": name, "seed_vertex": vertex, "d": d})
                break
            else:
                log.warning("%s: skipped patch slot %d after %d retries", name, slot, MAX_RETRIES)
    if not patches:
        raise DatasetEmpty("every patch extraction failed")
    meta = {
        "seed": int(seed),
        "d_range": [lo, hi],
        "d_relative": bool(relative),
        "meshes": names,
        "patches": records,
    }
    return PatchDataset(patches, n_hat, meta)


def resample_input(patch: Patch, r: int, epoch_seed: int, patch_id: int) -> TrainSample:
    """Uniform subset of ``n_hat / r`` target points, fixed by ``(epoch_seed, patch_id)``."""
    n_hat = len(patch.gt_points)
    if r < 1 or n_hat % r:
        raise NotDivisible(f"{n_hat} points are not divisible by rate {r}")
    idx = _seed_rng(epoch_seed, patch_id).choice(n_hat, n_hat // r, replace=False)
    return TrainSample(patch.gt_points[idx], patch.gt_points, idx)


def draw_augmentation(rng, scale_range=(0.8, 1.25), shift=0.1, rotate=True) -> Augmentation:
    rng = np.random.default_rng(rng)
    if rotate:
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        rot = Rotation.from_quat(q).as_matrix()
    else:
        rot = np.eye(3)
    s = float(rng.uniform(*scale_range))
    t = rng.uniform(-shift, shift, 3)
    return Augmentation(rot, s, t)


def augment(sample: TrainSample, rng, scale_range=(0.8, 1.25), shift=0.1, rotate=True) -> TrainSample:
    """Apply one random similarity transform to input and target alike."""
    aug = draw_augmentation(rng, scale_range, shift, rotate)
    return TrainSample(aug.apply(sample.input), aug.apply(sample.target), sample.input_index, aug)


# ----------------------------------------------------------------- file format


def save_dataset(path, ds: PatchDataset) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<III", VERSION, len(ds.patches), ds.n_hat)
    for p in ds.patches:
        out += struct.pack("<f", p.geodesic_radius)
        out += np.asarray(p.norm_center, dtype="<f4").tobytes()
        out += struct.pack("<f", p.norm_scale)
        out += np.ascontiguousarray(p.gt_points, dtype="<f4").tobytes()
    meta = dict(ds.meta)
    meta["seed_vertices"] = [int(p.seed_index) for p in ds.patches]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_dataset(path) -> PatchDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ParseError("not a PUPD dataset", path=path, offset=0)
    try:
        version, count, n_hat = struct.unpack_from("<III", data, 4)
        if version != VERSION:
            raise ParseError(f"unsupported version {version}", path=path, offset=4)
        pos = 16
        rows = []
        for _ in range(count):
            (radius,) = struct.unpack_from("<f", data, pos)
            center = np.frombuffer(data, "<f4", 3, pos + 4).astype(np.float64)
            (scale,) = struct.unpack_from("<f", data, pos + 16)
            pts = np.frombuffer(data, "<f4", n_hat * 3, pos + 20).reshape(n_hat, 3)
            pos += 20 + 12 * n_hat
            rows.append((radius, center, scale, pts.astype(np.float64)))
        (mlen,) = struct.unpack_from("<I", data, pos)
        meta = json.loads(data[pos + 4 : pos + 4 + mlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"truncated or corrupt dataset ({exc})", path=path) from None
    seeds = meta.pop("seed_vertices", [-1] * count)
    patches = [
        Patch(gt_points=pts, seed_index=int(s), geodesic_radius=float(rad),
              norm_center=c, norm_scale=float(sc))
        for (rad, c, sc, pts), s in zip(rows, seeds)
    ]
    return PatchDataset(patches, n_hat, meta)


def sphere_patches(count, n_hat, seed=0, subdivisions=4, d=0.6) -> tuple[PatchDataset, Mesh]:
    """Patches cropped from a unit icosphere; handy for smoke tests and overfitting."""
    mesh = icosphere(subdivisions)
    ds = build_dataset([mesh], count, (d, d), n_hat, seed, relative=False, names=["sphere"])
    return ds, mesh
