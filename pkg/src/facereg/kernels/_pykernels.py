"""Pure numpy implementations of the hot kernels.

Every function here has the same signature and produces bit-identical
results to its counterpart in ``_ckernels.pyx``.
"""
from __future__ import annotations

import numpy as np


def scatter_add_rows(out: np.ndarray, index: np.ndarray, src: np.ndarray) -> None:
    """out[index[i]] += src[i], accumulated in increasing i."""
    if index.size and (index.min() < 0 or index.max() >= out.shape[0]):
        bad = index[(index < 0) | (index >= out.shape[0])][0]
        raise IndexError(f"scatter index {bad} out of range for {out.shape[0]} rows")
    np.add.at(out, index, src)


def _dot(ax, ay, az, bx, by, bz):
    return (ax * bx + ay * by) + az * bz


def closest_point_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to the matching point p.

    All inputs are (n, 3) float64. Returns (dist2, bary) with bary the
    barycentric weights of the closest point.
    """
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    cx, cy, cz = c[:, 0], c[:, 1], c[:, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = p.shape[0]
    region = np.full(n, 6, dtype=np.int8)
    conds = [
        (d1 <= 0.0) & (d2 <= 0.0),
        (d3 >= 0.0) & (d4 <= d3),
        (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),
        (d6 >= 0.0) & (d5 <= d6),
        (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),
        (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0),
    ]
    for r in range(5, -1, -1):
        region[conds[r]] = r

    q = np.empty((n, 3))
    bary = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        m = region == 0
        q[m] = a[m]
        bary[m, 0] = 1.0
        m = region == 1
        q[m] = b[m]
        bary[m, 1] = 1.0
        m = region == 2
        if m.any():
            v = d1[m] / (d1[m] - d3[m])
            q[m, 0] = ax[m] + v * abx[m]
            q[m, 1] = ay[m] + v * aby[m]
            q[m, 2] = az[m] + v * abz[m]
            bary[m, 0] = 1.0 - v
            bary[m, 1] = v
        m = region == 3
        q[m] = c[m]
        bary[m, 2] = 1.0
        m = region == 4
        if m.any():
            w = d2[m] / (d2[m] - d6[m])
            q[m, 0] = ax[m] + w * acx[m]
            q[m, 1] = ay[m] + w * acy[m]
            q[m, 2] = az[m] + w * acz[m]
            bary[m, 0] = 1.0 - w
            bary[m, 2] = w
        m = region == 5
        if m.any():
            e = d4[m] - d3[m]
            w = e / (e + (d5[m] - d6[m]))
            q[m, 0] = bx[m] + w * (cx[m] - bx[m])
            q[m, 1] = by[m] + w * (cy[m] - by[m])
            q[m, 2] = bz[m] + w * (cz[m] - bz[m])
            bary[m, 1] = 1.0 - w
            bary[m, 2] = w
        m = region == 6
        if m.any():
            denom = 1.0 / ((va[m] + vb[m]) + vc[m])
            v = vb[m] * denom
            w = vc[m] * denom
            q[m, 0] = (ax[m] + abx[m] * v) + acx[m] * w
            q[m, 1] = (ay[m] + aby[m] * v) + acy[m] * w
            q[m, 2] = (az[m] + abz[m] * v) + acz[m] * w
            bary[m, 0] = (1.0 - v) - w
            bary[m, 1] = v
            bary[m, 2] = w
    dx = px - q[:, 0]
    dy = py - q[:, 1]
    dz = pz - q[:, 2]
    return (dx * dx + dy * dy) + dz * dz, bary


def _box_dist2(p, lo, hi):
    d = 0.0
    for k in range(3):
        t = lo[k] - p[k]
        if t > 0.0:
            d += t * t
        else:
            t = p[k] - hi[k]
            if t > 0.0:
                d += t * t
    return d


def bvh_closest(points, vertices, faces, node_lo, node_hi, node_left, node_right,
                node_start, node_count, order):
    n = points.shape[0]
    dist2 = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    lo_l = node_lo.tolist()
    hi_l = node_hi.tolist()
    left_l = node_left.tolist()
    right_l = node_right.tolist()
    start_l = node_start.tolist()
    count_l = node_count.tolist()
    for i in range(n):
        p = points[i]
        pl = p.tolist()
        best = np.inf
        best_f = -1
        best_b = (0.0, 0.0, 0.0)
        stack = [0]
        while stack:
            node = stack.pop()
            if _box_dist2(pl, lo_l[node], hi_l[node]) > best:
                continue
            left = left_l[node]
            if left < 0:
                fidx = order[start_l[node]:start_l[node] + count_l[node]]
                tri = faces[fidx]
                k = len(fidx)
                d, b = closest_point_triangles(
                    np.broadcast_to(p, (k, 3)), vertices[tri[:, 0]],
                    vertices[tri[:, 1]], vertices[tri[:, 2]])
                for j in range(k):
                    dj = d[j]
                    f = int(fidx[j])
                    if dj < best or (dj == best and f < best_f):
                        best = dj
                        best_f = f
                        best_b = b[j]
                continue
            right = right_l[node]
            dl = _box_dist2(pl, lo_l[left], hi_l[left])
            dr = _box_dist2(pl, lo_l[right], hi_l[right])
            if dl <= dr:
                stack.append(right)
                stack.append(left)
            else:
                stack.append(left)
                stack.append(right)
        dist2[i] = best
        face[i] = best_f
        bary[i] = best_b
    return dist2, face, bary
