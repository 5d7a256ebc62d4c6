"""Everything derived once from the template mesh, bundled into one file.

The bundle holds the decimation hierarchy, the upsampling matrices between
consecutive levels, spiral neighbourhood tables, the mouth region with its
blending mask, the boundary crop, and the two mouth PCA bases.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import container
from .bvh import FaceBVH
from .decimate import decimate
from .geodesics import geodesic_ball, geodesic_distance
from .mesh import TriMesh

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "facereg-bundle"


class SpiralError(ValueError):
    pass


class BundleError(ValueError):
    pass


# --------------------------------------------------------------------------- upsampling


def build_upsampler(fine: TriMesh, coarse: TriMesh, kept=None) -> sparse.csr_matrix:
    """Barycentric weights of each fine vertex on its closest coarse triangle.

    ``kept`` (coarse index -> fine index, from decimation ancestry) pins
    surviving vertices to a single weight of 1.
    """
    hit = FaceBVH(coarse).closest(fine.vertices)
    tri = coarse.faces[hit.face]
    w = np.clip(hit.bary, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(fine.n_vertices), 3)
    cols = tri.ravel()
    vals = w.ravel()
    if kept is not None:
        kept = np.asarray(kept, dtype=np.int64)
        pinned = np.zeros(fine.n_vertices, dtype=bool)
        pinned[kept] = True
        keep = ~pinned[rows]
        rows = np.concatenate([rows[keep], kept])
        cols = np.concatenate([cols[keep], np.arange(len(kept))])
        vals = np.concatenate([vals[keep], np.ones(len(kept))])
    nz = vals > 0
    u = sparse.coo_matrix((vals[nz], (rows[nz], cols[nz])),
                          shape=(fine.n_vertices, coarse.n_vertices)).tocsr()
    u.sum_duplicates()
    u.sort_indices()
    return u


# --------------------------------------------------------------------------- spirals


def _one_rings(mesh: TriMesh) -> list[list[int]]:
    """Counter-clockwise neighbour list of every vertex, starting at its smallest neighbour.

    Boundary vertices get their fan as an open chain, treated cyclically.
    """
    nxt: list[dict[int, int]] = [dict() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces.tolist():
        for v, p, q in ((a, b, c), (b, c, a), (c, a, b)):
            if p in nxt[v]:
                raise SpiralError(f"non-manifold vertex {v}: edge {v}-{p} is shared by "
                                  f"faces with the same orientation")
            nxt[v][p] = q
    rings = []
    for v, fan in enumerate(nxt):
        if not fan:
            rings.append([])
            continue
        heads = set(fan) - set(fan.values())
        if len(heads) > 1 or (len(set(fan.values())) != len(fan)):
            raise SpiralError(f"non-manifold vertex {v}: its faces do not form a single fan")
        cur = min(fan) if not heads else heads.pop()
        order = [cur]
        seen = {cur}
        while cur in fan:
            cur = fan[cur]
            if cur in seen:
                break
            order.append(cur)
            seen.add(cur)
        if len(order) != len(set(fan) | set(fan.values())):
            raise SpiralError(f"non-manifold vertex {v}: its faces do not form a single fan")
        k = order.index(min(order))
        rings.append(order[k:] + order[:k])
    return rings


def spiral_sequences(mesh: TriMesh, kernel_size: int) -> np.ndarray:
    """Spiral index sequence of length ``kernel_size`` for every vertex.

    The sequence is the vertex itself, its 1-ring counter-clockwise from the
    smallest-index neighbour, then each further ring gathered by walking the
    previous ring in order. Short sequences are padded with their last vertex.
    """
    if kernel_size < 1:
        raise ValueError("kernel_size must be positive")
    rings = _one_rings(mesh)
    out = np.empty((mesh.n_vertices, kernel_size), dtype=np.int64)
    for i in range(mesh.n_vertices):
        seq = [i]
        visited = {i}
        frontier = [i]
        while len(seq) < kernel_size and frontier:
            new = []
            for v in frontier:
                cyc = rings[v]
                m = len(cyc)
                if v == i:
                    start = 0
                else:
                    start = 0
                    for j in range(m):
                        if cyc[j] in visited and cyc[(j + 1) % m] not in visited:
                            start = (j + 1) % m
                            break
                for j in range(m):
                    u = cyc[(start + j) % m]
                    if u not in visited:
                        visited.add(u)
                        new.append(u)
            seq += new
            frontier = new
        seq = seq[:kernel_size]
        seq += [seq[-1]] * (kernel_size - len(seq))
        out[i] = seq
    return out


# --------------------------------------------------------------------------- mouth mask


def mask_tau(c: float, epsilon: float, d: float) -> float:
    """Width of the Gaussian fall-off that reaches ``epsilon`` at distance ``d``."""
    return (d - c) / math.sqrt(-math.log(epsilon))


def mask_from_distance(r: np.ndarray, c: float, epsilon: float, d: float) -> np.ndarray:
    """Unclamped mask: 1 on the plateau, Gaussian fall-off beyond it (zero past ``d``)."""
    tau = mask_tau(c, epsilon, d)
    m = np.exp(-((r - c) ** 2) / tau ** 2)
    m = np.where(r <= c, 1.0, m)
    return np.where(r > d, 0.0, m)


def build_blending_mask(mesh: TriMesh, inner_lips, c: float = 0.035, epsilon: float = 5e-4,
                        d: float = 0.15, t_factor: float = 1.0):
    """Per-vertex blending weights and the mouth region they live on."""
    if not 0 < c < d:
        raise ValueError(f"need 0 < c < d, got c={c}, d={d}")
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    inner = np.asarray(inner_lips, dtype=np.int64).ravel()
    if inner.size == 0:
        raise ValueError("inner-lip vertex set is empty")
    field_ = geodesic_distance(mesh, inner, t_factor)
    region = geodesic_ball(field_, d)
    mask = np.zeros(mesh.n_vertices)
    mask[region] = mask_from_distance(field_.distance[region], c, epsilon, d)
    return mask, region, field_.distance


def mouth_pca_basis(displacements: np.ndarray, region, n_components: int) -> np.ndarray:
    """Orthonormal basis (3|region| x k) of mouth-region displacement fields.

    The reference shape is the template itself, so the basis has zero mean
    by construction and no centring is applied.
    """
    disp = np.asarray(displacements, dtype=np.float64)
    region = np.asarray(region, dtype=np.int64)
    y = disp[:, region, :].reshape(len(disp), -1)
    if n_components > min(y.shape):
        raise ValueError(f"{n_components} components requested from {len(disp)} samples "
                         f"of dimension {y.shape[1]}")
    _, _, vt = np.linalg.svd(y, full_matrices=False)
    return np.ascontiguousarray(vt[:n_components].T)


# --------------------------------------------------------------------------- bundle


@dataclass(frozen=True, eq=False)
class TemplateBundle:
    levels: list
    upsamplers: list
    spirals: list
    kernel_sizes: list
    mouth_mask: np.ndarray
    mouth_region: np.ndarray
    inner_lips: np.ndarray
    boundary_crop: np.ndarray
    pca_id: np.ndarray
    pca_exp: np.ndarray
    landmark_map: dict
    config: dict = field(default_factory=dict)

    @property
    def mean_shape(self) -> TriMesh:
        return self.levels[0]

    @property
    def n_vertices(self) -> int:
        return self.levels[0].n_vertices

    def level_sizes(self) -> list[int]:
        return [m.n_vertices for m in self.levels]

    def validate(self) -> None:
        n_mouth = len(self.mouth_region)
        for name, basis in (("pca_id", self.pca_id), ("pca_exp", self.pca_exp)):
            if basis.shape[0] != 3 * n_mouth:
                raise BundleError(f"{name} has {basis.shape[0]} rows, expected 3 x "
                                  f"{n_mouth} mouth vertices")
        if len(self.upsamplers) != len(self.levels) - 1:
            raise BundleError("need one upsampler per pair of consecutive levels")
        for lvl, u in enumerate(self.upsamplers):
            if u.shape != (self.levels[lvl].n_vertices, self.levels[lvl + 1].n_vertices):
                raise BundleError(f"upsampler {lvl} has shape {u.shape}")
        for lvl, sp in enumerate(self.spirals):
            if sp.shape != (self.levels[lvl].n_vertices, self.kernel_sizes[lvl]):
                raise BundleError(f"spiral table {lvl} has shape {sp.shape}")


def decimation_targets(n: int, levels: int, factor: float) -> list[int]:
    out = []
    cur = n
    for _ in range(levels):
        cur = int(round(cur / factor))
        out.append(cur)
    if any(b >= a for a, b in zip([n] + out, out)) or out[-1] < 4:
        raise ValueError(f"decimation targets {out} are not strictly decreasing from {n}")
    return out


def build_bundle(template: TriMesh, inner_lips, boundary_crop, landmarks, pca_id, pca_exp,
                 c: float = 0.035, epsilon: float = 5e-4, d: float = 0.15, levels: int = 4,
                 factor: float = 4.0, kernels=(32, 16, 8, 4), t_factor: float = 1.0,
                 mask=None) -> TemplateBundle:
    """Assemble a bundle; ``kernels`` are given from the coarsest convolution level down.

    ``mask`` may pass a precomputed ``(mask, region)`` pair to skip the geodesic solve.
    """
    kernels = [int(k) for k in kernels]
    if len(kernels) != levels:
        raise ValueError(f"{levels} levels need {levels} kernel sizes, got {len(kernels)}")
    meshes = [TriMesh(template.vertices, template.faces, dict(landmarks))]
    ups = []
    for target in decimation_targets(template.n_vertices, levels, factor):
        coarse, anc = decimate(meshes[-1], target)
        ups.append(build_upsampler(meshes[-1], coarse, anc.kept))
        meshes.append(coarse)
        log.info("decimated to %d vertices", coarse.n_vertices)
    # convolutions run on levels levels-1 .. 0; kernels[0] belongs to the coarsest of them
    per_level = kernels[::-1]
    spirals = [spiral_sequences(meshes[lvl], per_level[lvl]) for lvl in range(levels)]
    if mask is None:
        m, region, _ = build_blending_mask(template, inner_lips, c, epsilon, d, t_factor)
    else:
        m, region = mask
    bundle = TemplateBundle(
        levels=meshes, upsamplers=ups, spirals=spirals, kernel_sizes=per_level,
        mouth_mask=np.asarray(m, dtype=np.float64),
        mouth_region=np.asarray(region, dtype=np.int64),
        inner_lips=np.asarray(inner_lips, dtype=np.int64),
        boundary_crop=np.asarray(boundary_crop, dtype=np.int64),
        pca_id=np.asarray(pca_id, dtype=np.float64),
        pca_exp=np.asarray(pca_exp, dtype=np.float64),
        landmark_map={k: int(v) for k, v in dict(landmarks).items()},
        config={"c": c, "epsilon": epsilon, "d": d, "levels": levels, "factor": factor,
                "kernels": kernels, "t_factor": t_factor},
    )
    bundle.validate()
    return bundle


def save_bundle(path, bundle: TemplateBundle) -> None:
    arrays = {}
    for lvl, m in enumerate(bundle.levels):
        arrays[f"level{lvl}/vertices"] = m.vertices
        arrays[f"level{lvl}/faces"] = m.faces
    for lvl, u in enumerate(bundle.upsamplers):
        arrays[f"up{lvl}/indptr"] = u.indptr.astype(np.int64)
        arrays[f"up{lvl}/indices"] = u.indices.astype(np.int64)
        arrays[f"up{lvl}/data"] = u.data
    for lvl, s in enumerate(bundle.spirals):
        arrays[f"spiral{lvl}"] = s
    for name in ("mouth_mask", "mouth_region", "inner_lips", "boundary_crop", "pca_id", "pca_exp"):
        arrays[name] = getattr(bundle, name)
    meta = {"format": BUNDLE_FORMAT, "n_levels": len(bundle.levels),
            "kernel_sizes": list(bundle.kernel_sizes), "landmark_map": bundle.landmark_map,
            "config": bundle.config}
    container.save(path, arrays, meta)


def load_bundle(path) -> TemplateBundle:
    arrays, meta = container.load(path)
    if meta.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"{path}: not a template bundle")
    n = meta["n_levels"]
    lm = meta["landmark_map"]
    levels = [TriMesh(arrays[f"level{i}/vertices"], arrays[f"level{i}/faces"], lm if i == 0 else {})
              for i in range(n)]
    ups = []
    for i in range(n - 1):
        shape = (levels[i].n_vertices, levels[i + 1].n_vertices)
        ups.append(sparse.csr_matrix((arrays[f"up{i}/data"], arrays[f"up{i}/indices"],
                                      arrays[f"up{i}/indptr"]), shape=shape))
    spirals = [arrays[f"spiral{i}"] for i in range(len(meta["kernel_sizes"]))]
    bundle = TemplateBundle(
        levels=levels, upsamplers=ups, spirals=spirals, kernel_sizes=meta["kernel_sizes"],
        mouth_mask=arrays["mouth_mask"], mouth_region=arrays["mouth_region"],
        inner_lips=arrays["inner_lips"], boundary_crop=arrays["boundary_crop"],
        pca_id=arrays["pca_id"], pca_exp=arrays["pca_exp"],
        landmark_map=dict(lm), config=meta["config"])
    bundle.validate()
    return bundle
