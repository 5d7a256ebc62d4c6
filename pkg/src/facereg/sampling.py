"""Seeded uniform sampling of points (with normals) on mesh surfaces."""
from __future__ import annotations

import numpy as np

from .mesh import PointCloud, TriMesh


class SamplingError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator: same seed, same stream on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of integers (run seed, stage, epoch, item...)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_surface(mesh: TriMesh, n_points: int, seed: int) -> PointCloud:
    """Area-weighted face choice, then uniform barycentric sampling inside the face.

    Normals are the flat normal of the source face.
    """
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    areas = mesh.face_areas()
    total = areas.sum()
    if not np.isfinite(total) or total <= 0:
        raise SamplingError("mesh has zero total area; nothing to sample")
    rng = make_rng(seed)
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    # zero-area faces occupy empty intervals of the cdf and are never selected
    face = np.searchsorted(cdf, rng.random(n_points), side="right")
    face = np.minimum(face, len(cdf) - 1)
    uv = rng.random((n_points, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    f = mesh.faces[face]
    a = mesh.vertices[f[:, 0]]
    pts = a + uv[:, :1] * (mesh.vertices[f[:, 1]] - a) + uv[:, 1:] * (mesh.vertices[f[:, 2]] - a)
    normals = mesh.face_normals()[face]
    return PointCloud(pts, normals, seed=seed, source_faces=face)


def select_points(cloud: PointCloud, n_points: int, seed: int) -> PointCloud:
    """Uniform subset without replacement, or with replacement if the cloud is too small."""
    if len(cloud) == 0:
        raise SamplingError("cannot select from an empty point cloud")
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    rng = make_rng(seed)
    idx = rng.choice(len(cloud), size=n_points, replace=len(cloud) < n_points)
    normals = None if cloud.normals is None else cloud.normals[idx]
    return PointCloud(cloud.points[idx], normals, seed=seed)
