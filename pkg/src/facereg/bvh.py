"""Axis-aligned bounding-box tree over mesh faces for closest-point queries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .mesh import TriMesh


@dataclass(frozen=True, eq=False)
class ClosestPoints:
    distance: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    point: np.ndarray


class FaceBVH:
    """Median-split tree stored as flat arrays; leaves hold at most ``leaf_size`` faces.

    Zero-area faces are left out, so every reported face has a well-defined
    normal and barycentric frame.
    """

    def __init__(self, mesh: TriMesh, leaf_size: int = 4):
        self.mesh = mesh
        v = mesh.vertices
        f = mesh.faces
        usable = np.flatnonzero(mesh.face_areas() > 0)
        if usable.size == 0:
            raise ValueError("mesh has no face with positive area")
        tri = v[f[usable]]
        flo = tri.min(axis=1)
        fhi = tri.max(axis=1)
        cen = tri.mean(axis=1)
        order = usable.copy()
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(s, e):
            sl = slice(s, e)
            pos = np.searchsorted(usable, order[sl])
            lo.append(flo[pos].min(axis=0))
            hi.append(fhi[pos].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(lo) - 1

        root = new_node(0, len(order))
        todo = [root]
        while todo:
            node = todo.pop()
            s, c = start[node], count[node]
            if c <= leaf_size:
                continue
            pos = np.searchsorted(usable, order[s:s + c])
            cc = cen[pos]
            axis = int(np.argmax(cc.max(axis=0) - cc.min(axis=0)))
            # stable sort keeps the build deterministic for equal centroids
            perm = np.argsort(cc[:, axis], kind="stable")
            order[s:s + c] = order[s:s + c][perm]
            mid = s + c // 2
            left[node] = new_node(s, mid)
            right[node] = new_node(mid, s + c)
            count[node] = 0
            todo += [left[node], right[node]]

        self.node_lo = np.ascontiguousarray(lo, dtype=np.float64)
        self.node_hi = np.ascontiguousarray(hi, dtype=np.float64)
        self.node_left = np.asarray(left, dtype=np.int64)
        self.node_right = np.asarray(right, dtype=np.int64)
        self.node_start = np.asarray(start, dtype=np.int64)
        self.node_count = np.asarray(count, dtype=np.int64)
        self.order = order.astype(np.int64)

    def closest(self, points, backend=None) -> ClosestPoints:
        """Closest surface point for each query; ``backend`` picks a kernel module."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        mod = kernels if backend is None else kernels.backends()[backend]
        d2, face, bary = mod.bvh_closest(
            pts, np.ascontiguousarray(self.mesh.vertices), np.ascontiguousarray(self.mesh.faces),
            self.node_lo, self.node_hi, self.node_left, self.node_right,
            self.node_start, self.node_count, self.order)
        tri = self.mesh.vertices[self.mesh.faces[face]]
        point = np.einsum("ij,ijk->ik", bary, tri)
        return ClosestPoints(np.sqrt(d2), face, bary, point)


def closest_points(mesh: TriMesh, points) -> ClosestPoints:
    return FaceBVH(mesh).closest(points)
