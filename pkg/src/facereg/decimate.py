"""Quadric-error-metric decimation by half-edge collapse.

Surviving vertices keep their original positions (subset placement), so a
decimated mesh is a re-triangulation of a subset of the input vertices and
every fine vertex either coincides with a coarse vertex or is located on the
coarse surface by barycentric coordinates.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Ancestry:
    """How a decimated mesh relates to its source.

    kept: source index of each coarse vertex (coarse index -> source index).
    merged_into: for every source vertex, the coarse vertex it collapsed into
        (itself, re-indexed, when it survived).
    reached_target: False when decimation stopped early on manifoldness grounds.
    """

    kept: np.ndarray
    merged_into: np.ndarray
    reached_target: bool


def _plane_quadric(n: np.ndarray, p: np.ndarray, weight: float) -> np.ndarray:
    q = np.append(n, -float(n @ p))
    return weight * np.outer(q, q)


class _Collapser:
    def __init__(self, mesh: TriMesh, boundary_weight: float):
        self.v = mesh.vertices.copy()
        self.f = mesh.faces.copy()
        n = mesh.n_vertices
        self.face_alive = np.ones(len(self.f), dtype=bool)
        self.vfaces: list[set[int]] = [set() for _ in range(n)]
        for fi, tri in enumerate(self.f.tolist()):
            for k in tri:
                self.vfaces[k].add(fi)
        self.alive = np.ones(n, dtype=bool)
        self.version = np.zeros(n, dtype=np.int64)
        self.parent = np.arange(n)
        self.q = np.zeros((n, 4, 4))
        cross = mesh.face_cross()
        dbl = np.linalg.norm(cross, axis=1)
        for fi, tri in enumerate(self.f):
            if dbl[fi] <= 0:
                continue
            normal = cross[fi] / dbl[fi]
            kq = _plane_quadric(normal, self.v[tri[0]], 0.5 * dbl[fi])
            for k in tri:
                self.q[k] += kq
        # boundary edges get a perpendicular constraint plane so the outline survives
        for a, b, fi in self._boundary_edges():
            if dbl[fi] <= 0:
                continue
            e = self.v[b] - self.v[a]
            length = np.linalg.norm(e)
            if length == 0:
                continue
            perp = np.cross(e, cross[fi] / dbl[fi])
            perp /= np.linalg.norm(perp)
            kq = _plane_quadric(perp, self.v[a], boundary_weight * length * length)
            self.q[a] += kq
            self.q[b] += kq
        self.heap: list = []
        self._counter = 0

    def _boundary_edges(self):
        count: dict[tuple[int, int], list[int]] = {}
        for fi, tri in enumerate(self.f.tolist()):
            if not self.face_alive[fi]:
                continue
            for k in range(3):
                a, b = tri[k], tri[(k + 1) % 3]
                key = (a, b) if a < b else (b, a)
                count.setdefault(key, []).append(fi)
        for (a, b), fl in count.items():
            if len(fl) == 1:
                yield a, b, fl[0]

    def neighbors(self, a: int) -> set[int]:
        out = set()
        for fi in self.vfaces[a]:
            out.update(self.f[fi].tolist())
        out.discard(a)
        return out

    def edge_faces(self, a: int, b: int) -> list[int]:
        return [fi for fi in self.vfaces[a] if fi in self.vfaces[b]]

    def is_boundary_vertex(self, a: int) -> bool:
        for b in self.neighbors(a):
            if len(self.edge_faces(a, b)) == 1:
                return True
        return False

    def cost(self, src: int, dst: int) -> float:
        p = np.append(self.v[dst], 1.0)
        return float(p @ (self.q[src] + self.q[dst]) @ p)

    def push_edge(self, a: int, b: int) -> None:
        for src, dst in ((a, b), (b, a)):
            c = self.cost(src, dst)
            self._counter += 1
            heapq.heappush(self.heap, (c, self._counter, src, dst,
                                       int(self.version[src]), int(self.version[dst])))

    def valid(self, src: int, dst: int) -> bool:
        shared = self.edge_faces(src, dst)
        if not shared:
            return False
        common = self.neighbors(src) & self.neighbors(dst)
        opposite = set()
        for fi in shared:
            opposite.update(self.f[fi].tolist())
        opposite -= {src, dst}
        if common != opposite:
            return False
        src_bd = self.is_boundary_vertex(src)
        dst_bd = self.is_boundary_vertex(dst)
        if src_bd:
            # boundary vertices only slide along the boundary
            if not (dst_bd and len(shared) == 1):
                return False
        elif dst_bd and len(shared) != 2:
            return False
        if src_bd and dst_bd and len(shared) == 2:
            return False
        # the collapse must not fold or flatten any surviving face
        for fi in self.vfaces[src]:
            if fi in shared:
                continue
            tri = self.f[fi]
            old = self.v[tri]
            new = old.copy()
            new[tri == src] = self.v[dst]
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            a_old = np.linalg.norm(n_old)
            a_new = np.linalg.norm(n_new)
            if a_new <= 1e-12 * max(a_old, 1e-300):
                return False
            if n_old @ n_new < 0.2 * a_old * a_new:
                return False
        # keep at least a tetrahedron's worth of structure around dst
        if len(self.neighbors(dst) | self.neighbors(src)) - 2 < 2:
            return False
        return True

    def collapse(self, src: int, dst: int) -> None:
        shared = self.edge_faces(src, dst)
        for fi in shared:
            self.face_alive[fi] = False
            for k in self.f[fi].tolist():
                self.vfaces[k].discard(fi)
        for fi in list(self.vfaces[src]):
            tri = self.f[fi]
            tri[tri == src] = dst
            self.vfaces[dst].add(fi)
        self.vfaces[src] = set()
        self.alive[src] = False
        self.parent[src] = dst
        self.q[dst] += self.q[src]
        self.version[dst] += 1
        for nb in self.neighbors(dst):
            self.version[nb] += 1
        for nb in self.neighbors(dst):
            self.push_edge(dst, nb)
            # edges around the neighbor changed their link too
            for nb2 in self.neighbors(nb):
                if nb2 != dst:
                    self.push_edge(nb, nb2)


def decimate(mesh: TriMesh, target_vertex_count: int,
             boundary_weight: float = 1e3) -> tuple[TriMesh, Ancestry]:
    """Collapse edges in order of quadric error until ``target_vertex_count`` remain."""
    n = mesh.n_vertices
    if target_vertex_count >= n:
        raise ValueError(f"target {target_vertex_count} must be smaller than the "
                         f"current vertex count {n}")
    if target_vertex_count < 4:
        raise ValueError("target vertex count must be at least 4")
    col = _Collapser(mesh, boundary_weight)
    used = np.zeros(n, dtype=bool)
    used[mesh.faces.ravel()] = True
    remaining = int(used.sum())
    pairs = set()
    for tri in mesh.faces.tolist():
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            pairs.add((a, b) if a < b else (b, a))
    for a, b in sorted(pairs):
        col.push_edge(a, b)

    while remaining > target_vertex_count and col.heap:
        _, _, src, dst, vs, vd = heapq.heappop(col.heap)
        if not (col.alive[src] and col.alive[dst]):
            continue
        if vs != col.version[src] or vd != col.version[dst]:
            continue
        if not col.valid(src, dst):
            continue
        col.collapse(src, dst)
        remaining -= 1
    reached = remaining <= target_vertex_count
    if not reached:
        log.warning("decimation stopped at %d vertices (target %d): no valid collapse left",
                    remaining, target_vertex_count)

    keep = np.flatnonzero(col.alive & used)
    remap = np.full(n, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    root = col.parent.copy()
    for _ in range(n):
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    merged = remap[root]
    faces = remap[col.f[col.face_alive]]
    coarse = TriMesh(mesh.vertices[keep], faces)
    return coarse, Ancestry(kept=keep, merged_into=merged, reached_target=bool(reached))
