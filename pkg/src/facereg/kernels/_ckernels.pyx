# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics mirror ``_pykernels`` bit for bit."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def scatter_add_rows(real[:, ::1] out, const long long[::1] index, const real[:, ::1] src):
    """out[index[i]] += src[i], accumulated in increasing i."""
    cdef Py_ssize_t i, j, r
    cdef Py_ssize_t n = index.shape[0]
    cdef Py_ssize_t c = src.shape[1]
    cdef Py_ssize_t nrows = out.shape[0]
    for i in range(n):
        r = index[i]
        if r < 0 or r >= nrows:
            raise IndexError(f"scatter index {r} out of range for {nrows} rows")
        for j in range(c):
            out[r, j] += src[i, j]


cdef inline double _dot(double ax, double ay, double az, double bx, double by, double bz) nogil:
    return ax * bx + ay * by + az * bz


cdef inline double _closest(
    double px, double py, double pz,
    double ax, double ay, double az,
    double bx, double by, double bz,
    double cx, double cy, double cz,
    double* bary,
) noexcept nogil:
    # Region tests follow the Voronoi-region walk; order and arithmetic must
    # match the vectorized fallback exactly.
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = _dot(abx, aby, abz, apx, apy, apz)
    cdef double d2 = _dot(acx, acy, acz, apx, apy, apz)
    cdef double bpx = px - bx, bpy = py - by, bpz = pz - bz
    cdef double d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    cdef double d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    cdef double cpx = px - cx, cpy = py - cy, cpz = pz - cz
    cdef double d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    cdef double d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    cdef double vc = d1 * d4 - d3 * d2
    cdef double vb = d5 * d2 - d1 * d6
    cdef double va = d3 * d6 - d5 * d4
    cdef double qx, qy, qz, v, w, denom, dx, dy, dz
    if d1 <= 0.0 and d2 <= 0.0:
        qx = ax; qy = ay; qz = az
        bary[0] = 1.0; bary[1] = 0.0; bary[2] = 0.0
    elif d3 >= 0.0 and d4 <= d3:
        qx = bx; qy = by; qz = bz
        bary[0] = 0.0; bary[1] = 1.0; bary[2] = 0.0
    elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        qx = ax + v * abx; qy = ay + v * aby; qz = az + v * abz
        bary[0] = 1.0 - v; bary[1] = v; bary[2] = 0.0
    elif d6 >= 0.0 and d5 <= d6:
        qx = cx; qy = cy; qz = cz
        bary[0] = 0.0; bary[1] = 0.0; bary[2] = 1.0
    elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        qx = ax + w * acx; qy = ay + w * acy; qz = az + w * acz
        bary[0] = 1.0 - w; bary[1] = 0.0; bary[2] = w
    elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bx + w * (cx - bx); qy = by + w * (cy - by); qz = bz + w * (cz - bz)
        bary[0] = 0.0; bary[1] = 1.0 - w; bary[2] = w
    else:
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        qx = (ax + abx * v) + acx * w
        qy = (ay + aby * v) + acy * w
        qz = (az + abz * v) + acz * w
        bary[0] = (1.0 - v) - w; bary[1] = v; bary[2] = w
    dx = px - qx; dy = py - qy; dz = pz - qz
    return (dx * dx + dy * dy) + dz * dz


cdef inline double _box_dist2(double px, double py, double pz,
                              const double[:, ::1] lo, const double[:, ::1] hi,
                              Py_ssize_t node) noexcept nogil:
    cdef double d = 0.0, t
    t = lo[node, 0] - px
    if t > 0.0:
        d += t * t
    else:
        t = px - hi[node, 0]
        if t > 0.0:
            d += t * t
    t = lo[node, 1] - py
    if t > 0.0:
        d += t * t
    else:
        t = py - hi[node, 1]
        if t > 0.0:
            d += t * t
    t = lo[node, 2] - pz
    if t > 0.0:
        d += t * t
    else:
        t = pz - hi[node, 2]
        if t > 0.0:
            d += t * t
    return d


def bvh_closest(
    const double[:, ::1] points,
    const double[:, ::1] vertices,
    const long long[:, ::1] faces,
    const double[:, ::1] node_lo,
    const double[:, ::1] node_hi,
    const long long[::1] node_left,
    const long long[::1] node_right,
    const long long[::1] node_start,
    const long long[::1] node_count,
    const long long[::1] order,
):
    """Closest triangle per query point by branch-and-bound over an AABB tree.

    Returns (dist2, face, bary). Ties on distance resolve to the lowest face
    index so the result is identical to an exhaustive argmin.
    """
    cdef Py_ssize_t n = points.shape[0]
    dist2_arr = np.empty(n, dtype=np.float64)
    face_arr = np.empty(n, dtype=np.int64)
    bary_arr = np.empty((n, 3), dtype=np.float64)
    cdef double[::1] dist2 = dist2_arr
    cdef long long[::1] face = face_arr
    cdef double[:, ::1] bary = bary_arr
    cdef Py_ssize_t max_depth = 2 * node_lo.shape[0] + 2
    stack_arr = np.empty(max_depth, dtype=np.int64)
    cdef long long[::1] stack = stack_arr
    cdef Py_ssize_t i, top, k, f
    cdef long long node, left, right, near, far
    cdef double px, py, pz, best, d, dl, dr
    cdef long long best_f
    cdef double tmp[3]
    cdef double best_b[3]
    with nogil:
        for i in range(n):
            px = points[i, 0]; py = points[i, 1]; pz = points[i, 2]
            best = INFINITY
            best_f = -1
            best_b[0] = 0.0; best_b[1] = 0.0; best_b[2] = 0.0
            top = 0
            stack[top] = 0
            top += 1
            while top > 0:
                top -= 1
                node = stack[top]
                if _box_dist2(px, py, pz, node_lo, node_hi, node) > best:
                    continue
                left = node_left[node]
                if left < 0:
                    for k in range(node_start[node], node_start[node] + node_count[node]):
                        f = order[k]
                        d = _closest(
                            px, py, pz,
                            vertices[faces[f, 0], 0], vertices[faces[f, 0], 1], vertices[faces[f, 0], 2],
                            vertices[faces[f, 1], 0], vertices[faces[f, 1], 1], vertices[faces[f, 1], 2],
                            vertices[faces[f, 2], 0], vertices[faces[f, 2], 1], vertices[faces[f, 2], 2],
                            tmp,
                        )
                        if d < best or (d == best and f < best_f):
                            best = d
                            best_f = f
                            best_b[0] = tmp[0]; best_b[1] = tmp[1]; best_b[2] = tmp[2]
                    continue
                right = node_right[node]
                dl = _box_dist2(px, py, pz, node_lo, node_hi, left)
                dr = _box_dist2(px, py, pz, node_lo, node_hi, right)
                if dl <= dr:
                    near = left; far = right
                else:
                    near = right; far = left
                # push far first so near is popped first
                stack[top] = far
                top += 1
                stack[top] = near
                top += 1
            dist2[i] = best
            face[i] = best_f
            bary[i, 0] = best_b[0]; bary[i, 1] = best_b[1]; bary[i, 2] = best_b[2]
    return dist2_arr, face_arr, bary_arr
