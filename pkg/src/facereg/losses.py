"""Training losses on registrations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .mesh import EdgeSet, TriMesh, edge_set, subset_edges


@dataclass(frozen=True)
class LossWeights:
    lambda_norm: float = 1e-4
    lambda_edge: float = 5e-5
    lambda_att: float = 1e-4
    lambda_bnd: float = 1e-3
    sigma: float = 5e-4

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")


@dataclass(frozen=True, eq=False)
class ChamferMatches:
    """Nearest neighbours in both directions and which terms survived the threshold."""

    s_to_p: np.ndarray  # for each registration vertex, nearest input point
    p_to_s: np.ndarray  # for each input point, nearest registration vertex
    keep_s: np.ndarray
    keep_p: np.ndarray

    @property
    def all_discarded(self) -> bool:
        return not (self.keep_s.any() or self.keep_p.any())


def nearest(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest ``dst`` point for each ``src`` point.

    Equal distances resolve to the lowest index.
    """
    tree = cKDTree(dst)
    k = min(len(dst), 4)
    d, i = tree.query(src, k=k)
    if k == 1:
        d, i = d[:, None], i[:, None]
    # cKDTree may return equidistant neighbours in any order; pick the lowest index
    best = d[:, :1]
    cand = np.where(d == best, i, np.iinfo(np.int64).max)
    idx = cand.min(axis=1)
    diff = src - dst[idx]
    return idx, np.einsum("ij,ij->i", diff, diff)


def chamfer_matches(s: np.ndarray, p: np.ndarray, sigma: float) -> ChamferMatches:
    if len(s) == 0 or len(p) == 0:
        raise ValueError("chamfer needs two non-empty point sets")
    s2p, ds = nearest(s, p)
    p2s, dp = nearest(p, s)
    return ChamferMatches(s2p, p2s, ds <= sigma, dp <= sigma)


def chamfer_loss(s: ad.Tensor, p: np.ndarray, sigma: float = 5e-4,
                 matches: ChamferMatches | None = None):
    """Symmetric sum of squared nearest distances; terms above ``sigma`` are dropped.

    Matches come from a k-d tree on the current values (or ``matches``) and are
    held fixed. Returns (loss, matches).
    """
    pts = np.asarray(p, dtype=s.dtype)
    m = matches or chamfer_matches(s.value.astype(np.float64), np.asarray(p, dtype=np.float64), sigma)
    terms = []
    si = np.flatnonzero(m.keep_s)
    if si.size:
        diff = ad.sub(ad.gather(s, si), ad.Tensor(pts[m.s_to_p[si]]))
        terms.append(ad.sum_(ad.square(diff)))
    pi = np.flatnonzero(m.keep_p)
    if pi.size:
        diff = ad.sub(ad.gather(s, m.p_to_s[pi]), ad.Tensor(pts[pi]))
        terms.append(ad.sum_(ad.square(diff)))
    if not terms:
        return ad.Tensor(np.zeros((), dtype=s.dtype)), m
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return total, m


def l1_vertex_loss(s: ad.Tensor, target) -> ad.Tensor:
    t = np.asarray(target.value if isinstance(target, ad.Tensor) else target)
    if t.shape != s.shape:
        raise ValueError(f"vertex count mismatch: {s.shape} vs {t.shape}")
    return ad.sum_(ad.abs_(ad.sub(s, ad.Tensor(t.astype(s.dtype)))))


def vertex_normals(s: ad.Tensor, faces: np.ndarray) -> ad.Tensor:
    """Differentiable area-weighted unit vertex normals."""
    a = ad.gather(s, faces[:, 0])
    b = ad.gather(s, faces[:, 1])
    c = ad.gather(s, faces[:, 2])
    cr = ad.cross(ad.sub(b, a), ad.sub(c, a))
    n = s.shape[0]
    acc = ad.add(ad.add(ad.scatter_add(cr, faces[:, 0], n), ad.scatter_add(cr, faces[:, 1], n)),
                 ad.scatter_add(cr, faces[:, 2], n))
    return ad.l2_normalize(acc)


def normal_loss(normals: ad.Tensor, index, target_normals) -> ad.Tensor:
    """Mean of ``1 - <n, n_target>`` over the matched pairs ``normals[index]``."""
    index = np.asarray(index, dtype=np.int64)
    t = np.asarray(target_normals, dtype=normals.dtype)
    if len(index) == 0:
        return ad.Tensor(np.zeros((), dtype=normals.dtype))
    dots = ad.sum_(ad.mul(ad.gather(normals, index), ad.Tensor(t)), axis=1)
    return ad.mean(ad.sub(1.0, dots))


def edge_loss(s: ad.Tensor, edges: EdgeSet) -> ad.Tensor:
    """Mean relative deviation of edge lengths from their rest lengths."""
    if len(edges) == 0:
        return ad.Tensor(np.zeros((), dtype=s.dtype))
    e = ad.sub(ad.gather(s, edges.pairs[:, 0]), ad.gather(s, edges.pairs[:, 1]))
    length = ad.sqrt(ad.sum_(ad.square(e), axis=1))
    rest = edges.lengths.astype(s.dtype)
    rel = ad.mul(ad.abs_(ad.sub(length, ad.Tensor(rest))), ad.Tensor((1.0 / rest).astype(s.dtype)))
    return ad.mean(rel)


def boundary_loss(s: ad.Tensor, template: TriMesh, crop, template_edges: EdgeSet | None = None) -> ad.Tensor:
    """L1 distance to the template plus edge loss, both restricted to the boundary crop."""
    crop = np.asarray(crop, dtype=np.int64)
    if crop.size == 0:
        return ad.Tensor(np.zeros((), dtype=s.dtype))
    edges = subset_edges(edge_set(template) if template_edges is None else template_edges, crop)
    l1 = l1_vertex_loss(ad.gather(s, crop), template.vertices[crop])
    return ad.add(l1, edge_loss(s, edges))


def attention_loss(logits: ad.Tensor | None, is_synthetic: bool) -> ad.Tensor:
    """Mean binary cross-entropy against all-ones targets (synthetic scans only)."""
    if logits is None or not is_synthetic:
        dt = np.float64 if logits is None else logits.dtype
        return ad.Tensor(np.zeros((), dtype=dt))
    return ad.mean(ad.softplus(ad.mul(logits, -1.0)))
