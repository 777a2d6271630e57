"""Synthetic worlds, trajectories and a detector emulator.

Everything random is driven by explicit seeds; per-frame generators are
derived from ``(seed, frame index)`` so frames can be produced in any order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .annotator import Detection2D, GroundTruthObject, ground_truth_map
from .geometry import (
    BBox2,
    CameraModel,
    FullyBehind,
    OrientedBox3,
    Pose2,
    Pose3,
    footprint,
    footprint_intersection_area,
    in_frustum_fraction,
    project_box_to_image,
    rot2,
    yaw_matrix,
)
from .localizer import perturb_delta
from .mapper import Detection3D, camera_position, is_visible
from .noisemodel import ClassNoiseModel
from .worldmodel import FREE, OCCUPIED, UNKNOWN, FloorPlan, line_of_sight

# (W, H, L): width along the wall, height, depth into the room
CLASS_DIMS = {
    "board": (1.6, 1.1, 0.12),
    "cabinet": (0.9, 1.9, 0.5),
    "desk": (1.4, 0.75, 0.7),
    "drawers": (0.5, 0.7, 0.6),
    "fire_ext": (0.3, 0.6, 0.3),
    "oven": (0.6, 0.6, 0.55),
    "plant": (0.5, 1.2, 0.5),
    "sink": (0.7, 0.9, 0.5),
    "sofa": (2.0, 0.85, 0.9),
    "table": (1.6, 0.75, 0.8),
}


class PlacementFailure(RuntimeError):
    pass


@dataclass
class WorldSpec:
    rooms_x: int = 2
    rooms_y: int = 1
    room_size: tuple = (6.0, 5.0)
    n_objects: int = 10
    classes: tuple = tuple(CLASS_DIMS)
    wall: float = 0.15
    door_width: float = 0.9
    resolution: float = 0.05
    margin: float = 0.25
    max_tries: int = 2000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room_size"] = list(self.room_size)
        d["classes"] = list(self.classes)
        return d


@dataclass
class DetectorSpec:
    """Detector emulation parameters shared by every class unless overridden."""

    p_detect: float = 1.0
    fp_rate: float = 0.0
    dims_sigma: float = 0.0  # relative std of each box dimension
    yaw_sigma: float = 0.0  # radians
    z_sigma: float = 0.0  # meters
    max_range: float = 8.0
    center_noise: bool = True
    # share of the class covariance drawn once per object instead of per frame
    bias_fraction: float = 0.0
    bias_seed: int = 0
    # objects with a smaller in-frustum fraction are never detected
    min_visible_fraction: float = 0.0
    # "uniform": anywhere in free space; "in_view": only where this camera can see
    fp_mode: str = "uniform"
    per_class_p_detect: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_detect <= 1.0:
            raise ValueError("p_detect must be a probability")
        if any(not 0.0 <= float(v) <= 1.0 for v in self.per_class_p_detect.values()):
            raise ValueError("per-class p_detect must be probabilities")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be non-negative")
        if self.fp_mode not in ("uniform", "in_view"):
            raise ValueError(f"unknown fp_mode {self.fp_mode!r}")
        if not 0.0 <= self.bias_fraction <= 1.0:
            raise ValueError("bias_fraction must lie in [0, 1]")

    def p(self, cls: str) -> float:
        return float(self.per_class_p_detect.get(cls, self.p_detect))


@dataclass
class SimWorld:
    plan: FloorPlan
    gt_objects: list
    class_noise: dict
    rooms: list  # room rectangles (xmin, ymin, xmax, ymax)
    doors: list  # door centers

    @property
    def classes(self) -> list[str]:
        return sorted({g.class_label for g in self.gt_objects})

    def gt_map(self):
        return ground_truth_map(self.gt_objects)


@dataclass
class SimTrajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        self.timestamps = t

    def __len__(self) -> int:
        return len(self.poses)


def default_noise(classes: Sequence[str], mean=(0.0, 0.0), cov=((0.01, 0.0), (0.0, 0.01))
                  ) -> dict[str, ClassNoiseModel]:
    return {c: ClassNoiseModel(c, mean, np.asarray(cov, float), 0) for c in classes}


# --- worlds -------------------------------------------------------------------


def generate_world(seed: int, spec: Optional[WorldSpec] = None,
                   class_noise: Optional[Mapping[str, ClassNoiseModel]] = None) -> SimWorld:
    """Rectangular rooms on a grid joined by doors, furniture along the walls."""
    spec = spec or WorldSpec()
    rng = np.random.default_rng([int(seed), 7])
    rw, rh = spec.room_size
    res, wall = spec.resolution, spec.wall
    width = spec.rooms_x * rw + (spec.rooms_x + 1) * wall + 2 * spec.margin
    height = spec.rooms_y * rh + (spec.rooms_y + 1) * wall + 2 * spec.margin
    nc, nr = int(round(width / res)), int(round(height / res))
    centers = np.stack(np.meshgrid((np.arange(nr) + 0.5) * res, (np.arange(nc) + 0.5) * res,
                                   indexing="ij"), axis=-1)
    grid = np.full((nr, nc), UNKNOWN, dtype=np.uint8)

    rooms = []
    for iy in range(spec.rooms_y):
        for ix in range(spec.rooms_x):
            x0 = spec.margin + wall + ix * (rw + wall)
            y0 = spec.margin + wall + iy * (rh + wall)
            rooms.append((x0, y0, x0 + rw, y0 + rh))
    bx0, by0 = spec.margin, spec.margin
    bx1, by1 = width - spec.margin, height - spec.margin
    y, x = centers[..., 0], centers[..., 1]
    building = (x >= bx0) & (x < bx1) & (y >= by0) & (y < by1)
    grid[building] = OCCUPIED
    for x0, y0, x1, y1 in rooms:
        grid[(x >= x0) & (x < x1) & (y >= y0) & (y < y1)] = FREE

    doors = []
    half = spec.door_width / 2
    for iy in range(spec.rooms_y):
        for ix in range(spec.rooms_x):
            x0, y0, x1, y1 = rooms[iy * spec.rooms_x + ix]
            if ix + 1 < spec.rooms_x:
                dy = rng.uniform(y0 + 0.6 + half, y1 - 0.6 - half)
                grid[(x >= x1 - 1e-9) & (x < x1 + wall) & (np.abs(y - dy) < half)] = FREE
                doors.append((x1 + wall / 2, float(dy)))
            if iy + 1 < spec.rooms_y:
                dx = rng.uniform(x0 + 0.6 + half, x1 - 0.6 - half)
                grid[(y >= y1 - 1e-9) & (y < y1 + wall) & (np.abs(x - dx) < half)] = FREE
                doors.append((float(dx), y1 + wall / 2))
    plan = FloorPlan(grid, res, Pose2())

    gt: list[GroundTruthObject] = []
    fps = []
    classes = list(spec.classes)
    for k in range(spec.n_objects):
        for _ in range(spec.max_tries):
            cls = classes[int(rng.integers(len(classes)))]
            W, H, L = CLASS_DIMS.get(cls, (0.8, 0.8, 0.8))
            x0, y0, x1, y1 = rooms[int(rng.integers(len(rooms)))]
            side = int(rng.integers(4))
            gap = 0.05
            # yaw puts the local x axis along the wall, local y into the room
            if side == 0:
                yaw, cx, cy = 0.0, rng.uniform(x0 + W / 2, x1 - W / 2), y0 + gap + L / 2
            elif side == 1:
                yaw, cx, cy = math.pi / 2, x1 - gap - L / 2, rng.uniform(y0 + W / 2, y1 - W / 2)
            elif side == 2:
                yaw, cx, cy = math.pi, rng.uniform(x0 + W / 2, x1 - W / 2), y1 - gap - L / 2
            else:
                yaw, cx, cy = -math.pi / 2, x0 + gap + L / 2, rng.uniform(y0 + W / 2, y1 - W / 2)
            box = OrientedBox3([cx, cy, H / 2], [W, H, L], yaw_matrix(yaw))
            fp = footprint(box)
            if not np.all(plan.is_free(fp.corners())):
                continue
            if any(np.hypot(*(fp.center - np.asarray(d))) < 1.0 + max(W, L) / 2 for d in doors):
                continue
            grown = type(fp)(fp.cx, fp.cy, fp.half_width + 0.15, fp.half_length + 0.15, fp.yaw)
            if any(footprint_intersection_area(grown, o) > 0 for o in fps):
                continue
            gt.append(GroundTruthObject(k, cls, box))
            fps.append(fp)
            break
        else:
            raise PlacementFailure(f"could not place object {k} after {spec.max_tries} tries")

    if class_noise is None:
        class_noise = default_noise(classes)
    return SimWorld(plan, gt, dict(class_noise), rooms, doors)


# --- camera rig -----------------------------------------------------------------


def camera_extrinsic(yaw: float, height: float = 1.0, offset=(0.0, 0.0)) -> Pose3:
    """Robot -> camera transform of a level camera looking along ``yaw``."""
    # camera axes expressed in the robot frame: x right, y down, z forward
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R = np.stack([right, down, fwd])  # rows map robot vectors to camera axes
    pos = np.array([offset[0], offset[1], height])
    return Pose3(R, -R @ pos)


def default_rig(n_cameras: int = 4, height: float = 1.0) -> list[Pose3]:
    return [camera_extrinsic(2 * math.pi * k / n_cameras, height) for k in range(n_cameras)]


def default_camera() -> CameraModel:
    return CameraModel.from_fov(math.radians(90.0), 640, 480)


def world_to_camera(robot_pose: Pose2, extrinsic: Pose3) -> Pose3:
    return extrinsic.compose(robot_pose.to_pose3().inverse())


# --- trajectories -----------------------------------------------------------------


def _polyline_trajectory(waypoints, speed: float, omega: float, dt: float,
                         t0: float = 0.0) -> SimTrajectory:
    """Drive straight segments at ``speed``; turn in place at ``omega`` between them."""
    pts = [np.asarray(p, dtype=float) for p in waypoints]
    poses, ts = [], []
    t = t0
    heading = math.atan2(*(pts[1] - pts[0])[::-1]) if len(pts) > 1 else 0.0
    cur = pts[0].copy()
    poses.append(Pose2(cur[0], cur[1], heading))
    ts.append(t)
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        length = float(np.hypot(*seg))
        if length < 1e-9:
            continue
        target = math.atan2(seg[1], seg[0])
        dth = Pose2(0, 0, target - heading).theta
        n_turn = int(math.ceil(abs(dth) / (omega * dt)))
        for k in range(1, n_turn + 1):
            t += dt
            poses.append(Pose2(cur[0], cur[1], heading + dth * k / n_turn))
            ts.append(t)
        heading = target
        n_move = int(math.ceil(length / (speed * dt)))
        for k in range(1, n_move + 1):
            t += dt
            p = a + seg * k / n_move
            poses.append(Pose2(p[0], p[1], heading))
            ts.append(t)
        cur = b.copy()
    return SimTrajectory(np.array(ts), poses)


def _room_loop(room, inset: float, start_corner: int = 0) -> list:
    x0, y0, x1, y1 = room
    corners = [(x0 + inset, y0 + inset), (x1 - inset, y0 + inset),
               (x1 - inset, y1 - inset), (x0 + inset, y1 - inset)]
    k = start_corner % 4
    order = corners[k:] + corners[:k]
    return order + [order[0]]


def _door_crossing(world: SimWorld, a: int, b: int) -> list:
    """Waypoints through the door joining rooms ``a`` and ``b`` (adjacent)."""
    ra, rb = world.rooms[a], world.rooms[b]
    ca = np.array([(ra[0] + ra[2]) / 2, (ra[1] + ra[3]) / 2])
    cb = np.array([(rb[0] + rb[2]) / 2, (rb[1] + rb[3]) / 2])
    best = min(world.doors, key=lambda d: np.hypot(*(np.asarray(d) - (ca + cb) / 2)))
    d = np.asarray(best)
    axis = np.argmax(np.abs(cb - ca))
    step = np.zeros(2)
    step[axis] = np.sign(cb[axis] - ca[axis]) * 0.9
    return [tuple(d - step), tuple(d + step)]


def coverage_trajectory(world: SimWorld, laps: int = 1, inset: float = 1.6, speed: float = 0.5,
                        omega: float = 1.0, dt: float = 0.1, start_room: int = 0,
                        start_corner: int = 0, room_order: Optional[Sequence[int]] = None
                        ) -> SimTrajectory:
    """Loop around every room (``laps`` times), crossing doors between rooms."""
    order = list(room_order) if room_order is not None else (
        list(range(start_room, len(world.rooms))) + list(range(0, start_room)))
    wps: list = []
    for n, r in enumerate(order):
        loop = _room_loop(world.rooms[r], inset, start_corner if n == 0 else 0)
        if n > 0:
            loop = _nearest_first(loop[:-1], wps[-1])
        for _ in range(laps):
            wps.extend(loop if not wps or wps[-1] != loop[0] else loop[1:])
        if n + 1 < len(order):
            wps.extend(_door_crossing(world, r, order[n + 1]))
    return _polyline_trajectory(wps, speed, omega, dt)


def _nearest_first(corners: list, p) -> list:
    k = int(np.argmin([np.hypot(c[0] - p[0], c[1] - p[1]) for c in corners]))
    order = corners[k:] + corners[:k]
    return order + [order[0]]


def localization_trajectory(world: SimWorld, seed: int, duration_laps: int = 1,
                            speed: float = 0.5, dt: float = 0.1) -> SimTrajectory:
    """Seeded start room/corner and room order, one lap per room and back."""
    rng = np.random.default_rng([int(seed), 11])
    n = len(world.rooms)
    start = int(rng.integers(n))
    order = [(start + k) % n for k in range(n)] + [start]
    inset = float(rng.uniform(1.4, 1.8))
    return coverage_trajectory(world, laps=duration_laps, inset=inset, speed=speed, dt=dt,
                               start_corner=int(rng.integers(4)), room_order=order)


# --- detector emulation -------------------------------------------------------------


def _noisy_box(g: GroundTruthObject, model: Optional[ClassNoiseModel], det: DetectorSpec,
               rng: np.random.Generator) -> OrientedBox3:
    box = g.box
    c = box.center.copy()
    if model is not None and det.center_noise:
        R2 = rot2(footprint(box).yaw)
        L = np.linalg.cholesky(np.asarray(model.cov, float))
        rho = det.bias_fraction
        z = rng.standard_normal(2)
        if rho > 0:
            zb = np.random.default_rng([int(det.bias_seed), 202, int(g.id)]).standard_normal(2)
            z = math.sqrt(rho) * zb + math.sqrt(1.0 - rho) * z
        c[:2] += R2 @ (np.asarray(model.mean, float) + L @ z)
    if det.z_sigma:
        c[2] += rng.normal(0.0, det.z_sigma)
    dims = box.dims.copy()
    if det.dims_sigma:
        dims = dims * np.clip(1.0 + rng.normal(0.0, det.dims_sigma, 3), 0.3, 3.0)
    R = box.rotation
    if det.yaw_sigma:
        R = yaw_matrix(rng.normal(0.0, det.yaw_sigma)) @ R
    return OrientedBox3(c, dims, R)


def _in_view(world: SimWorld, xy, cam_pose: Pose3, cam: CameraModel, max_range: float) -> bool:
    cpos = camera_position(cam_pose)
    p = np.array([xy[0], xy[1], cpos[2]])
    pc = cam_pose.apply(p)
    if pc[2] <= 0.1 or np.hypot(*(np.asarray(xy) - cpos[:2])) > max_range:
        return False
    u = cam.intrinsics @ pc
    u = u[:2] / u[2]
    if not (0 <= u[0] <= cam.image_width):
        return False
    return line_of_sight(world.plan, cpos[:2], xy)


def visible_objects(world: SimWorld, cam_pose: Pose3, cam: CameraModel,
                    max_range: float = math.inf) -> list[GroundTruthObject]:
    cpos = camera_position(cam_pose)[:2]
    return [
        g for g in world.gt_objects
        if np.hypot(*(g.box.center[:2] - cpos)) <= max_range
        and is_visible(g.box, cam_pose, cam, world.plan)
    ]


def simulate_detections(world: SimWorld, robot_pose: Pose2, cam: CameraModel, extrinsic: Pose3,
                        rng, det: Optional[DetectorSpec] = None,
                        gt_objects: Optional[Sequence[GroundTruthObject]] = None
                        ) -> list[Detection3D]:
    """Camera-frame detections of one frame.

    ``gt_objects`` overrides the world's object list (for scenes that change
    over time).
    """
    det = det or DetectorSpec()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cam_pose = world_to_camera(robot_pose, extrinsic)
    objs = world.gt_objects if gt_objects is None else gt_objects
    sub = SimWorld(world.plan, list(objs), world.class_noise, world.rooms, world.doors)
    out = []
    for g in visible_objects(sub, cam_pose, cam, det.max_range):
        if rng.random() >= det.p(g.class_label):
            continue
        if det.min_visible_fraction > 0 and (
                in_frustum_fraction(g.box, cam_pose, cam) < det.min_visible_fraction):
            continue
        box = _noisy_box(g, world.class_noise.get(g.class_label), det, rng)
        out.append(Detection3D(g.class_label, float(rng.uniform(0.6, 1.0)),
                               box.transformed(cam_pose)))
    n_fp = int(rng.poisson(det.fp_rate)) if det.fp_rate > 0 else 0
    if n_fp:
        classes = world.classes or sorted(CLASS_DIMS)
        free = world.plan.free_cell_centers()
        for _ in range(n_fp):
            if det.fp_mode == "uniform":
                xy = free[int(rng.integers(len(free)))]
            else:
                for _ in range(200):
                    xy = free[int(rng.integers(len(free)))]
                    if _in_view(world, xy, cam_pose, cam, det.max_range):
                        break
                else:
                    continue
            cls = classes[int(rng.integers(len(classes)))]
            W, H, L = CLASS_DIMS.get(cls, (0.8, 0.8, 0.8))
            box = OrientedBox3([xy[0], xy[1], H / 2], [W, H, L],
                               yaw_matrix(rng.uniform(-math.pi, math.pi)))
            out.append(Detection3D(cls, float(rng.uniform(0.3, 0.9)), box.transformed(cam_pose)))
    return out


def simulate_detections_2d(world: SimWorld, cam_pose: Pose3, cam: CameraModel,
                           rng: np.random.Generator, p_detect: float = 1.0,
                           pixel_sigma: float = 0.0) -> list[Detection2D]:
    """Image-space boxes of the visible objects (occlusion gating only)."""
    out = []
    for g in visible_objects(world, cam_pose, cam):
        if rng.random() >= p_detect:
            continue
        try:
            bb, _ = project_box_to_image(g.box, cam_pose, cam)
        except FullyBehind:
            continue
        v = np.array(bb.to_list())
        if pixel_sigma:
            v = v + rng.normal(0.0, pixel_sigma, 4)
            v = np.clip(v, 0, [cam.image_width, cam.image_height] * 2)
        lo, hi = np.minimum(v[:2], v[2:]), np.maximum(v[:2], v[2:])
        out.append(Detection2D(g.class_label, BBox2(lo[0], lo[1], hi[0], hi[1]), 0.9))
    return out


# --- odometry --------------------------------------------------------------------


def corrupt_odometry(traj: SimTrajectory, sigma, seed: int, floor: float = 0.1) -> list[dict]:
    """Noisy relative-motion events between consecutive trajectory poses."""
    rng = np.random.default_rng([int(seed), 3])
    events = []
    for k in range(1, len(traj)):
        rel = traj.poses[k - 1].between(traj.poses[k]).as_array()
        noisy = perturb_delta(rel, sigma, rng, floor=floor)
        events.append({"type": "odom", "timestamp_s": float(traj.timestamps[k]),
                       "delta": [float(v) for v in noisy]})
    return events


# --- event streams -----------------------------------------------------------------


def frame_rng(seed: int, k: int, cam_idx: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), 101, int(k), int(cam_idx)])


def mapping_stream(world: SimWorld, traj: SimTrajectory, cam: CameraModel, rig: Sequence[Pose3],
                   det: DetectorSpec, seed: int, every: int = 1, scene=None) -> list[dict]:
    """Mapper input records, one per camera image.

    ``scene(k)`` may return the object list present at step ``k``.
    """
    recs = []
    for k in range(0, len(traj), every):
        pose = traj.poses[k]
        objs = scene(k) if scene is not None else None
        for ci, ext in enumerate(rig):
            dets = simulate_detections(world, pose, cam, ext, frame_rng(seed, k, ci), det, objs)
            recs.append({
                "frame_id": f"{k:06d}_{ci}",
                "timestamp_s": float(traj.timestamps[k]),
                "robot_pose": pose.to_list(),
                "cam_pose": world_to_camera(pose, ext).to_dict(),
                "detections": [d.to_dict() for d in dets],
            })
    return recs


def localization_stream(world: SimWorld, traj: SimTrajectory, cam: CameraModel,
                        rig: Sequence[Pose3], det: DetectorSpec, sigma_odom, seed: int,
                        obs_every: int = 5) -> list[dict]:
    """Odometry events every step plus one observation per camera every ``obs_every`` steps."""
    odom = corrupt_odometry(traj, sigma_odom, seed)
    events = []
    for k in range(len(traj)):
        if k > 0:
            events.append(odom[k - 1])
        if k % obs_every == 0:
            for ci, ext in enumerate(rig):
                dets = simulate_detections(world, traj.poses[k], cam, ext, frame_rng(seed, k, ci),
                                           det)
                events.append({"type": "obs", "timestamp_s": float(traj.timestamps[k]),
                               "cam_pose_in_robot": ext.to_dict(),
                               "detections": [d.to_dict() for d in dets]})
    return events


def trajectory_records(traj: SimTrajectory) -> list[dict]:
    return [{"timestamp_s": float(t), "pose": p.to_list()}
            for t, p in zip(traj.timestamps, traj.poses)]
