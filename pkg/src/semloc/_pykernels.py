"""Numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``SEMLOC_PURE_PYTHON=1``.
Footprints are packed as ``[cx, cy, half_width, half_length, yaw]`` rows.
"""

import math

import numpy as np

# below this p_o the shape term cannot move the weight by more than 1e-12
P_SKIP = 1e-12
_TOL = 1e-9


def _corners(fp):
    c, s = np.cos(fp[:, 4]), np.sin(fp[:, 4])
    ex, ey = fp[:, 2], fp[:, 3]
    lx = np.stack([-ex, ex, ex, -ex], axis=1)
    ly = np.stack([-ey, -ey, ey, ey], axis=1)
    x = fp[:, 0:1] + c[:, None] * lx - s[:, None] * ly
    y = fp[:, 1:2] + s[:, None] * lx + c[:, None] * ly
    return np.stack([x, y], axis=2)


def _inside(pts, fp):
    # pts (N, k, 2) against rectangle rows of fp (N, 5)
    d = pts - fp[:, None, 0:2]
    c, s = np.cos(fp[:, 4])[:, None], np.sin(fp[:, 4])[:, None]
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    return (np.abs(lx) <= fp[:, 2:3] + _TOL) & (np.abs(ly) <= fp[:, 3:4] + _TOL)


def intersection_area(a, b):
    """Overlap area of rectangle pairs via candidate vertices sorted by angle."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n = a.shape[0]
    out = np.zeros(n)
    if n == 0:
        return out
    reach = a[:, 2] + a[:, 3] + b[:, 2] + b[:, 3]
    near = np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]) <= reach
    if not np.any(near):
        return out
    a, b = a[near], b[near]
    ca, cb = _corners(a), _corners(b)
    va = _inside(ca, b)
    vb = _inside(cb, a)

    p = ca[:, :, None, :]
    d = (np.roll(ca, -1, axis=1) - ca)[:, :, None, :]
    q = cb[:, None, :, :]
    e = (np.roll(cb, -1, axis=1) - cb)[:, None, :, :]
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    qp = q - p
    ok = np.abs(denom) > 1e-15
    safe = np.where(ok, denom, 1.0)
    s = (qp[..., 0] * e[..., 1] - qp[..., 1] * e[..., 0]) / safe
    t = (qp[..., 0] * d[..., 1] - qp[..., 1] * d[..., 0]) / safe
    ve = ok & (s >= -_TOL) & (s <= 1 + _TOL) & (t >= -_TOL) & (t <= 1 + _TOL)
    xe = p + s[..., None] * d

    m = a.shape[0]
    pts = np.concatenate([ca, cb, xe.reshape(m, 16, 2)], axis=1)
    valid = np.concatenate([va, vb, ve.reshape(m, 16)], axis=1)
    cnt = valid.sum(axis=1)
    cen = (pts * valid[..., None]).sum(axis=1) / np.maximum(cnt, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - cen[:, None, 1], pts[..., 0] - cen[:, None, 0])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    srt = np.take_along_axis(pts, order[..., None], axis=1)
    vs = np.take_along_axis(valid, order, axis=1)
    srt = np.where(vs[..., None], srt, srt[:, 0:1, :])
    nxt = np.roll(srt, -1, axis=1)
    area = 0.5 * np.abs(np.sum(srt[..., 0] * nxt[..., 1] - srt[..., 1] * nxt[..., 0], axis=1))
    area[cnt < 3] = 0.0
    out[near] = area
    return out


def footprint_iou(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    inter = intersection_area(a, b)
    union = 4 * a[:, 2] * a[:, 3] + 4 * b[:, 2] * b[:, 3] - inter
    return np.clip(np.where(inter > 0, inter / union, 0.0), 0.0, 1.0)


def det_world(particles, det):
    """Per-particle world footprint of a robot-frame detection footprint."""
    px, py, th = particles[:, 0], particles[:, 1], particles[:, 2]
    c, s = np.cos(th), np.sin(th)
    out = np.empty((particles.shape[0], 5))
    out[:, 0] = px + c * det[0] - s * det[1]
    out[:, 1] = py + s * det[0] + c * det[1]
    out[:, 2] = det[2]
    out[:, 3] = det[3]
    out[:, 4] = th + det[4]
    return out


def max_density(particles, det, means, icovs):
    """Best mode-normalized density over class Gaussians, and its index."""
    particles = np.asarray(particles, dtype=float)
    n = particles.shape[0]
    if len(means) == 0:
        return np.zeros(n), np.full(n, -1, dtype=np.int64)
    w = det_world(particles, np.asarray(det, dtype=float))
    d = w[:, None, 0:2] - np.asarray(means)[None]
    ic = np.asarray(icovs)
    m2 = ic[:, 0] * d[..., 0] ** 2 + 2 * ic[:, 1] * d[..., 0] * d[..., 1] + ic[:, 2] * d[..., 1] ** 2
    idx = np.argmin(m2, axis=1)
    return np.exp(-0.5 * m2[np.arange(n), idx]), idx


def object_weights(particles, det, means, icovs, obj_fps, eta):
    """p_o * p_g + (1 - p_o) * eta for every particle."""
    particles = np.asarray(particles, dtype=float)
    n = particles.shape[0]
    if len(means) == 0:
        return np.full(n, float(eta))
    p_o, idx = max_density(particles, det, means, icovs)
    wts = np.full(n, float(eta))
    live = p_o >= P_SKIP
    if np.any(live):
        w = det_world(particles[live], np.asarray(det, dtype=float))
        iou = footprint_iou(w, np.asarray(obj_fps, dtype=float)[idx[live]])
        p_g = np.exp(-(1.0 - iou))
        wts[live] = p_o[live] * p_g + (1.0 - p_o[live]) * eta
    return wts


def max_overlap(particles, det, obj_fps):
    particles = np.asarray(particles, dtype=float)
    n = particles.shape[0]
    best = np.zeros(n)
    if len(obj_fps) == 0:
        return best
    w = det_world(particles, np.asarray(det, dtype=float))
    for fp in np.asarray(obj_fps, dtype=float):
        best = np.maximum(best, footprint_iou(w, fp[None, :]))
    return best


def raycast(occ, r0, c0, r1, c1):
    """First occupied cell along the segment between two points in cell units.

    Coordinates are continuous (cell (i, j) spans [i, i+1) x [j, j+1)).
    Returns (hit, row, col); row/col are -1 when the segment is clear.
    """
    nr, nc = occ.shape
    i, j = int(math.floor(r0)), int(math.floor(c0))
    i1, j1 = int(math.floor(r1)), int(math.floor(c1))
    i = min(max(i, 0), nr - 1)
    j = min(max(j, 0), nc - 1)
    i1 = min(max(i1, 0), nr - 1)
    j1 = min(max(j1, 0), nc - 1)
    dr, dc = r1 - r0, c1 - c0
    si = 1 if dr > 0 else -1
    sj = 1 if dc > 0 else -1
    inf = float("inf")
    t_dr = abs(1.0 / dr) if dr != 0 else inf
    t_dc = abs(1.0 / dc) if dc != 0 else inf
    if dr > 0:
        t_mr = (i + 1 - r0) * t_dr
    elif dr < 0:
        t_mr = (r0 - i) * t_dr
    else:
        t_mr = inf
    if dc > 0:
        t_mc = (j + 1 - c0) * t_dc
    elif dc < 0:
        t_mc = (c0 - j) * t_dc
    else:
        t_mc = inf
    steps = abs(i1 - i) + abs(j1 - j)
    for _ in range(steps + 1):
        if occ[i, j]:
            return True, i, j
        if i == i1 and j == j1:
            break
        if t_mr < t_mc:
            i += si
            t_mr += t_dr
        else:
            j += sj
            t_mc += t_dc
        if not (0 <= i < nr and 0 <= j < nc):
            break
    return False, -1, -1
