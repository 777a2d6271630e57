"""Poses, pinhole projection, oriented boxes and their ground footprints.

Frame conventions used throughout the package:

* World and robot frames are z-up.  The robot frame has x forward, y left.
* Camera frames follow the pinhole convention: z along the optical axis,
  x to the right, y down.
* A :class:`Pose3` attached to a camera maps points of the parent frame
  (world, or robot for extrinsics) *into* the camera frame, so
  ``p_cam = R @ p_parent + t``.
* Box dimensions are ``(W, H, L)``: ``W`` along the box's local x axis,
  ``L`` along local y and ``H`` along local z (height).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEPTH_EPS = 1e-9


class GeometryError(ValueError):
    pass


class BehindCamera(GeometryError):
    """Point lies on or behind the image plane."""


class FullyBehind(GeometryError):
    """Every corner of a box lies behind the camera."""


class DegenerateMean(GeometryError):
    """Weighted rotation mean is rank deficient."""


def wrap_angle(a):
    """Wrap angle(s) to the half-open interval (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return yaw_matrix(yaw) @ ry @ rx


def is_rotation(R, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.max(np.abs(R.T @ R - np.eye(3))) < tol and abs(np.linalg.det(R) - 1.0) < tol
    )


@dataclass(frozen=True)
class Pose2:
    """Planar pose; theta is kept in (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        """Relative pose of ``other`` expressed in this pose's frame."""
        return self.inverse().compose(other)

    def transform_points(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts @ rot2(self.theta).T + np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def to_pose3(self, z: float = 0.0) -> "Pose3":
        """Robot-to-world rigid transform of this planar pose."""
        return Pose3(yaw_matrix(self.theta), np.array([self.x, self.y, z]))

    def to_list(self) -> list:
        return [self.x, self.y, self.theta]

    @classmethod
    def from_list(cls, v) -> "Pose2":
        return cls(*[float(a) for a in v])


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(R):
            raise GeometryError("Pose3 rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose3":
        Rt = self.rotation.T
        return Pose3(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose3") -> "Pose3":
        """Transform applying ``other`` first, then ``self``."""
        return Pose3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d) -> "Pose3":
        return cls(np.asarray(d["rotation"], dtype=float).reshape(3, 3), d["translation"])

    def __eq__(self, other):
        if not isinstance(other, Pose3):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float).reshape(3, 3)
        if K[0, 0] <= 0 or K[1, 1] <= 0 or np.any(np.tril(K, -1) != 0) or K[2, 2] != 1:
            raise GeometryError("intrinsics must be upper triangular with positive focals")
        if self.image_width <= 0 or self.image_height <= 0:
            raise GeometryError("image dimensions must be positive")
        K.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)

    @classmethod
    def from_fov(cls, hfov: float, width: int, height: int) -> "CameraModel":
        f = 0.5 * width / math.tan(0.5 * hfov)
        K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, width, height)

    def to_dict(self) -> dict:
        return {
            "intrinsics": [float(v) for v in self.intrinsics.ravel()],
            "image_width": int(self.image_width),
            "image_height": int(self.image_height),
        }

    @classmethod
    def from_dict(cls, d) -> "CameraModel":
        return cls(np.asarray(d["intrinsics"], dtype=float).reshape(3, 3),
                   int(d["image_width"]), int(d["image_height"]))


@dataclass(frozen=True, eq=False)
class OrientedBox3:
    center: np.ndarray
    dims: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        c = np.array(self.center, dtype=float).reshape(3)
        d = np.array(self.dims, dtype=float).reshape(3)
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise GeometryError(f"box dims must be positive, got {d}")
        if not is_rotation(R):
            raise GeometryError("box rotation is not in SO(3)")
        for a in (c, d, R):
            a.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "rotation", R)

    @property
    def half_extents_local(self) -> np.ndarray:
        """Half sizes along local (x, y, z) = (W, L, H) / 2."""
        W, H, L = self.dims
        return 0.5 * np.array([W, L, H])

    def corners(self) -> np.ndarray:
        h = self.half_extents_local
        signs = np.array(
            [[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)], dtype=float
        )
        return (signs * h) @ self.rotation.T + self.center

    def volume(self) -> float:
        return float(np.prod(self.dims))

    def transformed(self, pose: Pose3) -> "OrientedBox3":
        return OrientedBox3(pose.apply(self.center), self.dims, pose.rotation @ self.rotation)

    def with_yaw(self, yaw: float) -> "OrientedBox3":
        return OrientedBox3(self.center, self.dims, yaw_matrix(yaw))

    def __eq__(self, other):
        if not isinstance(other, OrientedBox3):
            return NotImplemented
        return bool(
            np.array_equal(self.center, other.center)
            and np.array_equal(self.dims, other.dims)
            and np.array_equal(self.rotation, other.rotation)
        )


@dataclass(frozen=True)
class Footprint2:
    cx: float
    cy: float
    half_width: float
    half_length: float
    yaw: float = 0.0

    def __post_init__(self):
        if self.half_width <= 0 or self.half_length <= 0:
            raise GeometryError("footprint extents must be positive")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def extents(self) -> tuple[float, float]:
        return (self.half_width, self.half_length)

    def corners(self) -> np.ndarray:
        """Counter-clockwise corner polygon, shape (4, 2)."""
        ex, ey = self.half_width, self.half_length
        local = np.array([[-ex, -ey], [ex, -ey], [ex, ey], [-ex, ey]])
        return local @ rot2(self.yaw).T + self.center

    def area(self) -> float:
        return 4.0 * self.half_width * self.half_length

    def as_array(self) -> np.ndarray:
        """Packed ``[cx, cy, half_width, half_length, yaw]`` as used by the kernels."""
        return np.array([self.cx, self.cy, self.half_width, self.half_length, self.yaw])

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float)) - self.center
        local = pts @ rot2(self.yaw)
        return (np.abs(local[:, 0]) <= self.half_width) & (np.abs(local[:, 1]) <= self.half_length)


@dataclass(frozen=True)
class BBox2:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise GeometryError("BBox2 min corner exceeds max corner")

    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def iou(self, other: "BBox2") -> float:
        iw = min(self.xmax, other.xmax) - max(self.xmin, other.xmin)
        ih = min(self.ymax, other.ymax) - max(self.ymin, other.ymin)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        union = self.area() + other.area() - inter
        return inter / union if union > 0 else 0.0

    def to_list(self) -> list:
        return [self.xmin, self.ymin, self.xmax, self.ymax]


# --- projection -------------------------------------------------------------


def project_point(p_world, cam_pose: Pose3, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of a world point to pixel coordinates (u, v)."""
    p_cam = cam_pose.apply(np.asarray(p_world, dtype=float))
    if p_cam[2] <= DEPTH_EPS:
        raise BehindCamera(f"camera-frame depth {p_cam[2]:.3g} m")
    x = cam.intrinsics @ p_cam
    return x[:2] / x[2]


def _project_cam_points(p_cam: np.ndarray, cam: CameraModel) -> np.ndarray:
    x = p_cam @ cam.intrinsics.T
    return x[:, :2] / x[:, 2:3]


def frustum_samples(box: OrientedBox3, per_face: int = 2) -> np.ndarray:
    """Corners plus a ``per_face x per_face`` grid of cell centers on each face."""
    g = (np.arange(per_face) + 0.5) / per_face * 2.0 - 1.0
    a, b = np.meshgrid(g, g, indexing="ij")
    a, b = a.ravel(), b.ravel()
    pts = [np.array([[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)], float)]
    for axis in range(3):
        others = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            face = np.empty((a.size, 3))
            face[:, axis] = sign
            face[:, others[0]] = a
            face[:, others[1]] = b
            pts.append(face)
    unit = np.vstack(pts)
    return (unit * box.half_extents_local) @ box.rotation.T + box.center


def in_frustum_fraction(box: OrientedBox3, cam_pose: Pose3, cam: CameraModel,
                        per_face: int = 2) -> float:
    p_cam = cam_pose.apply(frustum_samples(box, per_face))
    front = p_cam[:, 2] > DEPTH_EPS
    if not np.any(front):
        return 0.0
    uv = _project_cam_points(p_cam[front], cam)
    inside = (
        (uv[:, 0] >= 0) & (uv[:, 0] <= cam.image_width)
        & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.image_height)
    )
    return float(np.count_nonzero(inside)) / p_cam.shape[0]


_BOX_EDGES = [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7),
              (0, 4), (1, 5), (2, 6), (3, 7)]


def project_box_to_image(box: OrientedBox3, cam_pose: Pose3,
                         cam: CameraModel) -> tuple[BBox2, float]:
    """Image-space hull of a 3D box and the fraction of it inside the frustum.

    Edges crossing the image plane are clipped at the near plane before
    projection, so boxes straddling the camera still yield a sensible hull.
    """
    p_cam = cam_pose.apply(box.corners())
    z = p_cam[:, 2]
    if np.all(z <= DEPTH_EPS):
        raise FullyBehind("all box corners behind the camera")
    near = 1e-3
    pts = [p_cam[z > near]]
    for i, j in _BOX_EDGES:
        if (z[i] > near) != (z[j] > near):
            s = (near - z[i]) / (z[j] - z[i])
            pts.append((p_cam[i] + s * (p_cam[j] - p_cam[i]))[None, :])
    pts = np.vstack(pts)
    uv = _project_cam_points(pts, cam)
    lo = np.clip(uv.min(axis=0), 0.0, [cam.image_width, cam.image_height])
    hi = np.clip(uv.max(axis=0), 0.0, [cam.image_width, cam.image_height])
    bbox = BBox2(float(lo[0]), float(lo[1]), float(max(hi[0], lo[0])), float(max(hi[1], lo[1])))
    return bbox, in_frustum_fraction(box, cam_pose, cam)


# --- footprints and IoU -----------------------------------------------------


def box_yaw(R) -> float:
    """Heading of a box's local x axis projected on the ground plane."""
    R = np.asarray(R, dtype=float)
    ax = R[:2, 0]
    if math.hypot(ax[0], ax[1]) >= 1e-6:
        return wrap_angle(math.atan2(ax[1], ax[0]))
    ay = R[:2, 1]
    # local y sits at +90 deg from local x
    return wrap_angle(math.atan2(ay[1], ay[0]) - math.pi / 2)


def footprint(box: OrientedBox3) -> Footprint2:
    W, _, L = box.dims
    return Footprint2(float(box.center[0]), float(box.center[1]), 0.5 * W, 0.5 * L,
                      box_yaw(box.rotation))


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: Sequence, clipper: Sequence) -> list:
    """Sutherland-Hodgman clipping of ``subject`` by a CCW convex ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for k in range(n):
        if not out:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        m = len(inp)
        for i in range(m):
            px, py = inp[i - 1]
            qx, qy = inp[i]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def footprint_intersection_area(a: Footprint2, b: Footprint2) -> float:
    r = a.half_width + a.half_length + b.half_width + b.half_length
    if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 > r * r:
        return 0.0
    poly = clip_convex(a.corners().tolist(), b.corners().tolist())
    return max(polygon_area(poly), 0.0) if len(poly) >= 3 else 0.0


def iou_footprint(a: Footprint2, b: Footprint2) -> float:
    inter = footprint_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.area() + b.area() - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_box3(a: OrientedBox3, b: OrientedBox3) -> float:
    """Yaw-decomposed 3D IoU: footprint overlap times vertical overlap."""
    ha, hb = 0.5 * a.dims[1], 0.5 * b.dims[1]
    dz = min(a.center[2] + ha, b.center[2] + hb) - max(a.center[2] - ha, b.center[2] - hb)
    if dz <= 0.0:
        return 0.0
    fa, fb = footprint(a), footprint(b)
    inter = footprint_intersection_area(fa, fb) * dz
    if inter <= 0.0:
        return 0.0
    union = fa.area() * 2 * ha + fb.area() * 2 * hb - inter
    return float(min(max(inter / union, 0.0), 1.0))


# --- rotation averaging -----------------------------------------------------


def rotation_average(rotations, weights=None) -> np.ndarray:
    """Weighted chordal L2 mean of rotations, projected back onto SO(3)."""
    Rs = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    if Rs.shape[0] == 0:
        raise ValueError("need at least one rotation")
    w = np.ones(Rs.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (Rs.shape[0],) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per rotation")
    M = np.einsum("i,ijk->jk", w / w.sum(), Rs)
    U, S, Vt = np.linalg.svd(M)
    if S[-1] <= 1e-9:
        raise DegenerateMean(f"singular values {S}")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt
