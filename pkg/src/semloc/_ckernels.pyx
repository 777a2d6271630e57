# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same contracts as ``semloc._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, exp, fabs, floor, INFINITY

cnp.import_array()

cdef double P_SKIP = 1e-12


cdef inline void _corners(double cx, double cy, double ex, double ey, double yaw,
                          double* xs, double* ys) noexcept nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double lx[4]
    cdef double ly[4]
    cdef int k
    lx[0] = -ex; lx[1] = ex; lx[2] = ex; lx[3] = -ex
    ly[0] = -ey; ly[1] = -ey; ly[2] = ey; ly[3] = ey
    for k in range(4):
        xs[k] = cx + c * lx[k] - s * ly[k]
        ys[k] = cy + s * lx[k] + c * ly[k]


cdef double _inter_area(double ax, double ay, double aex, double aey, double ayaw,
                        double bx, double by, double bex, double bey, double byaw) noexcept nogil:
    # Sutherland-Hodgman: clip rectangle A by the four edges of rectangle B
    cdef double r = aex + aey + bex + bey
    if (ax - bx) * (ax - bx) + (ay - by) * (ay - by) > r * r:
        return 0.0
    cdef double px[16]
    cdef double py[16]
    cdef double qx[16]
    cdef double qy[16]
    cdef double cxs[4]
    cdef double cys[4]
    cdef int n, m, k, i
    cdef double ex, ey, x0, y0, sp, sq, t, area
    cdef double ux, uy, vx, vy
    _corners(ax, ay, aex, aey, ayaw, px, py)
    _corners(bx, by, bex, bey, byaw, cxs, cys)
    n = 4
    for k in range(4):
        if n == 0:
            break
        x0 = cxs[k]
        y0 = cys[k]
        ex = cxs[(k + 1) % 4] - x0
        ey = cys[(k + 1) % 4] - y0
        m = 0
        for i in range(n):
            ux = px[(i + n - 1) % n]
            uy = py[(i + n - 1) % n]
            vx = px[i]
            vy = py[i]
            sp = ex * (uy - y0) - ey * (ux - x0)
            sq = ex * (vy - y0) - ey * (vx - x0)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    qx[m] = ux + t * (vx - ux)
                    qy[m] = uy + t * (vy - uy)
                    m += 1
                qx[m] = vx
                qy[m] = vy
                m += 1
            elif sp >= 0:
                t = sp / (sp - sq)
                qx[m] = ux + t * (vx - ux)
                qy[m] = uy + t * (vy - uy)
                m += 1
        n = m
        for i in range(n):
            px[i] = qx[i]
            py[i] = qy[i]
    if n < 3:
        return 0.0
    area = 0.0
    for i in range(n):
        area += px[i] * py[(i + 1) % n] - py[i] * px[(i + 1) % n]
    area *= 0.5
    return area if area > 0 else 0.0


cdef inline double _iou(double ax, double ay, double aex, double aey, double ayaw,
                        double bx, double by, double bex, double bey, double byaw) noexcept nogil:
    cdef double inter = _inter_area(ax, ay, aex, aey, ayaw, bx, by, bex, bey, byaw)
    if inter <= 0.0:
        return 0.0
    cdef double v = inter / (4.0 * aex * aey + 4.0 * bex * bey - inter)
    if v > 1.0:
        return 1.0
    return v


def intersection_area(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(np.atleast_2d(b), dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], i
    out = np.zeros(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _inter_area(A[i, 0], A[i, 1], A[i, 2], A[i, 3], A[i, 4],
                               B[i, 0], B[i, 1], B[i, 2], B[i, 3], B[i, 4])
    return out


def footprint_iou(a, b):
    a2, b2 = np.broadcast_arrays(np.atleast_2d(np.asarray(a, dtype=np.float64)),
                                 np.atleast_2d(np.asarray(b, dtype=np.float64)))
    cdef double[:, ::1] A = np.ascontiguousarray(a2)
    cdef double[:, ::1] B = np.ascontiguousarray(b2)
    cdef Py_ssize_t n = A.shape[0], i
    out = np.zeros(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _iou(A[i, 0], A[i, 1], A[i, 2], A[i, 3], A[i, 4],
                        B[i, 0], B[i, 1], B[i, 2], B[i, 3], B[i, 4])
    return out


def max_density(particles, det, means, icovs):
    cdef double[:, ::1] P = np.ascontiguousarray(particles, dtype=np.float64)
    cdef double[::1] D = np.ascontiguousarray(det, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], g = len(means), i, k, best
    po = np.zeros(n)
    idx = np.full(n, -1, dtype=np.int64)
    if g == 0:
        return po, idx
    cdef double[:, ::1] M = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] IC = np.ascontiguousarray(icovs, dtype=np.float64)
    cdef double[::1] o = po
    cdef long long[::1] oi = idx
    cdef double c, s, wx, wy, dx, dy, m2, bm
    with nogil:
        for i in range(n):
            c = cos(P[i, 2])
            s = sin(P[i, 2])
            wx = P[i, 0] + c * D[0] - s * D[1]
            wy = P[i, 1] + s * D[0] + c * D[1]
            bm = INFINITY
            best = 0
            for k in range(g):
                dx = wx - M[k, 0]
                dy = wy - M[k, 1]
                m2 = IC[k, 0] * dx * dx + 2.0 * IC[k, 1] * dx * dy + IC[k, 2] * dy * dy
                if m2 < bm:
                    bm = m2
                    best = k
            o[i] = exp(-0.5 * bm)
            oi[i] = best
    return po, idx


def object_weights(particles, det, means, icovs, obj_fps, double eta):
    cdef double[:, ::1] P = np.ascontiguousarray(particles, dtype=np.float64)
    cdef double[::1] D = np.ascontiguousarray(det, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], g = len(means), i, k, best
    out = np.full(n, eta)
    if g == 0:
        return out
    cdef double[:, ::1] M = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] IC = np.ascontiguousarray(icovs, dtype=np.float64)
    cdef double[:, ::1] F = np.ascontiguousarray(obj_fps, dtype=np.float64)
    cdef double[::1] o = out
    cdef double c, s, wx, wy, dx, dy, m2, bm, p_o, p_g
    with nogil:
        for i in range(n):
            c = cos(P[i, 2])
            s = sin(P[i, 2])
            wx = P[i, 0] + c * D[0] - s * D[1]
            wy = P[i, 1] + s * D[0] + c * D[1]
            bm = INFINITY
            best = 0
            for k in range(g):
                dx = wx - M[k, 0]
                dy = wy - M[k, 1]
                m2 = IC[k, 0] * dx * dx + 2.0 * IC[k, 1] * dx * dy + IC[k, 2] * dy * dy
                if m2 < bm:
                    bm = m2
                    best = k
            p_o = exp(-0.5 * bm)
            if p_o < P_SKIP:
                continue
            p_g = exp(_iou(wx, wy, D[2], D[3], P[i, 2] + D[4],
                           F[best, 0], F[best, 1], F[best, 2], F[best, 3], F[best, 4]) - 1.0)
            o[i] = p_o * p_g + (1.0 - p_o) * eta
    return out


def max_overlap(particles, det, obj_fps):
    cdef double[:, ::1] P = np.ascontiguousarray(particles, dtype=np.float64)
    cdef double[::1] D = np.ascontiguousarray(det, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], g = len(obj_fps), i, k
    out = np.zeros(n)
    if g == 0:
        return out
    cdef double[:, ::1] F = np.ascontiguousarray(obj_fps, dtype=np.float64)
    cdef double[::1] o = out
    cdef double c, s, wx, wy, v, b
    with nogil:
        for i in range(n):
            c = cos(P[i, 2])
            s = sin(P[i, 2])
            wx = P[i, 0] + c * D[0] - s * D[1]
            wy = P[i, 1] + s * D[0] + c * D[1]
            b = 0.0
            for k in range(g):
                v = _iou(wx, wy, D[2], D[3], P[i, 2] + D[4],
                         F[k, 0], F[k, 1], F[k, 2], F[k, 3], F[k, 4])
                if v > b:
                    b = v
            o[i] = b
    return out


def raycast(occ, double r0, double c0, double r1, double c1):
    cdef const cnp.uint8_t[:, :] G = np.asarray(occ, dtype=np.uint8)
    cdef Py_ssize_t nr = G.shape[0], nc = G.shape[1]
    cdef long i = <long>floor(r0), j = <long>floor(c0)
    cdef long i1 = <long>floor(r1), j1 = <long>floor(c1)
    i = min(max(i, 0), nr - 1)
    j = min(max(j, 0), nc - 1)
    i1 = min(max(i1, 0), nr - 1)
    j1 = min(max(j1, 0), nc - 1)
    cdef double dr = r1 - r0, dc = c1 - c0
    cdef long si = 1 if dr > 0 else -1
    cdef long sj = 1 if dc > 0 else -1
    cdef double t_dr = fabs(1.0 / dr) if dr != 0 else INFINITY
    cdef double t_dc = fabs(1.0 / dc) if dc != 0 else INFINITY
    cdef double t_mr, t_mc
    if dr > 0:
        t_mr = (i + 1 - r0) * t_dr
    elif dr < 0:
        t_mr = (r0 - i) * t_dr
    else:
        t_mr = INFINITY
    if dc > 0:
        t_mc = (j + 1 - c0) * t_dc
    elif dc < 0:
        t_mc = (c0 - j) * t_dc
    else:
        t_mc = INFINITY
    cdef long steps = labs_(i1 - i) + labs_(j1 - j), it
    for it in range(steps + 1):
        if G[i, j]:
            return True, int(i), int(j)
        if i == i1 and j == j1:
            break
        if t_mr < t_mc:
            i += si
            t_mr += t_dr
        else:
            j += sj
            t_mc += t_dc
        if i < 0 or i >= nr or j < 0 or j >= nc:
            break
    return False, -1, -1


cdef inline long labs_(long v) noexcept nogil:
    return -v if v < 0 else v
