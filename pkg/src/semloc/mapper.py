"""Incremental object-map construction from posed 3D detections."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import (
    CameraModel,
    DegenerateMean,
    Footprint2,
    OrientedBox3,
    Pose2,
    Pose3,
    footprint,
    in_frustum_fraction,
    iou_box3,
    rotation_average,
)
from .noisemodel import ClassNoiseModel, instantiate
from .worldmodel import FloorPlan, MapObject, ObjectMap, OutOfBounds, RoomMap, raycast

log = logging.getLogger(__name__)

FORBIDDEN_COST = 1e6


@dataclass(frozen=True)
class Detection3D:
    class_label: str
    confidence: float
    box: OrientedBox3

    def to_dict(self) -> dict:
        return {
            "class": self.class_label,
            "confidence": float(self.confidence),
            "center": [float(v) for v in self.box.center],
            "dims": [float(v) for v in self.box.dims],
            "rotation": [float(v) for v in self.box.rotation.ravel()],
        }

    @classmethod
    def from_dict(cls, d) -> "Detection3D":
        box = OrientedBox3(d["center"], d["dims"], np.asarray(d["rotation"], float).reshape(3, 3))
        return cls(str(d["class"]), float(d.get("confidence", 1.0)), box)


@dataclass
class MapperConfig:
    d_xy: float = 0.1
    d_theta: float = 0.03
    tau_cost: float = 0.5
    tau_purge: float = 0.2
    delta: float = 1.0
    min_confidence: float = 0.0
    # fuse overlapping same-class global objects after each integration
    fuse_duplicates: bool = True
    # drop detections the reporting camera cannot have seen (outside the
    # frustum or behind a floor-plan wall)
    gate_detections: bool = True

    def __post_init__(self):
        if min(self.d_xy, self.d_theta, self.tau_cost, self.tau_purge, self.delta) <= 0:
            raise ValueError("mapper parameters must be positive")
        if self.tau_cost > 1:
            raise ValueError("tau_cost must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class LocalMap(ObjectMap):
    """Short-term map accumulated between two integrations."""

    def __init__(self, objects=(), anchor_pose: Optional[Pose2] = None):
        super().__init__(objects)
        self.anchor_pose = anchor_pose


def camera_position(cam_pose: Pose3) -> np.ndarray:
    """World position of a camera whose pose maps world -> camera."""
    return -cam_pose.rotation.T @ cam_pose.translation


def is_visible(box: OrientedBox3, cam_pose: Pose3, cam: CameraModel,
               plan: Optional[FloorPlan]) -> bool:
    if in_frustum_fraction(box, cam_pose, cam) <= 0:
        return False
    if plan is None:
        return True
    cam_xy = camera_position(cam_pose)[:2]
    try:
        hit = raycast(plan, cam_xy, box.center[:2])
    except OutOfBounds:
        return False
    if hit is None:
        return True
    # a wall cell under the object itself (wall-mounted boxes) does not occlude it
    fp = footprint(box)
    pad = plan.resolution
    grown = Footprint2(fp.cx, fp.cy, fp.half_width + pad, fp.half_length + pad, fp.yaw)
    return bool(grown.contains(hit)[0])


def update_active(omap: ObjectMap, cam_pose: Pose3, cam: CameraModel,
                  plan: Optional[FloorPlan], only=None) -> ObjectMap:
    """Flag objects that are inside the frustum with a wall-free line of sight."""
    for o in (omap if only is None else only):
        o.active = is_visible(o.box, cam_pose, cam, plan)
    return omap


def association_cost(o1, o2, models: Optional[Mapping[str, ClassNoiseModel]] = None
                     ) -> Optional[float]:
    """Half IoU cost plus half center cost; ``None`` for different classes.

    Without a noise model for the class the cost degrades to ``1 - IoU``.
    """
    if o1.class_label != o2.class_label:
        return None
    c_iou = 1.0 - iou_box3(o1.box, o2.box)
    model = models.get(o1.class_label) if models else None
    if model is None:
        return c_iou
    g = instantiate(model, o1)
    c_cen = 1.0 - math.exp(-0.5 * g.mahalanobis_sq(o2.box.center[:2]))
    return 0.5 * (c_iou + c_cen)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment for a rectangular matrix.

    Shortest augmenting path with row/column potentials, O(n^2 m).
    Returns ``min(n, m)`` pairs ``(row, col)`` sorted by row.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost must be 2D")
    n, m = C.shape
    if n == 0 or m == 0:
        return []
    transposed = n > m
    if transposed:
        C = C.T
        n, m = m, n
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) assigned to column j
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = C[i0 - 1]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(p[j] - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    return sorted(pairs)


def cost_matrix(a: Sequence, b: Sequence, models=None) -> np.ndarray:
    C = np.full((len(a), len(b)), FORBIDDEN_COST)
    for i, oa in enumerate(a):
        for j, ob in enumerate(b):
            c = association_cost(oa, ob, models)
            if c is not None:
                C[i, j] = c
    return C


def associate(a: Sequence, b: Sequence, cfg: MapperConfig, models=None, C=None):
    """Optimal one-to-one association with threshold post-filtering.

    Returns ``(pairs, unmatched_a, unmatched_b)`` with indices into ``a``
    and ``b``.  Pairs whose cost reaches ``cfg.tau_cost`` are demoted.
    """
    if C is None:
        C = cost_matrix(a, b, models)
    pairs = [(i, j) for i, j in hungarian(C) if C[i, j] < cfg.tau_cost]
    ma = {i for i, _ in pairs}
    mb = {j for _, j in pairs}
    return (pairs, [i for i in range(len(a)) if i not in ma],
            [j for j in range(len(b)) if j not in mb])


def merge(target: MapObject, pred: MapObject) -> MapObject:
    """Fold ``pred`` into ``target`` with match-count weights (in place)."""
    if target.class_label != pred.class_label:
        raise ValueError("cannot merge objects of different classes")
    n2, n1 = float(target.n_match), float(pred.n_match)
    s = n1 + n2
    center = (n2 * target.box.center + n1 * pred.box.center) / s
    dims = (n2 * target.box.dims + n1 * pred.box.dims) / s
    try:
        R = rotation_average([target.box.rotation, pred.box.rotation], [n2, n1])
    except DegenerateMean:
        log.warning("degenerate rotation mean merging into object %d; keeping its rotation",
                    target.id)
        R = target.box.rotation
    target.box = OrientedBox3(center, dims, R)
    target.n_match = target.n_match + pred.n_match
    return target


def detections_to_world(dets: Sequence[Detection3D], cam_pose: Pose3,
                        min_confidence: float = 0.0) -> list[MapObject]:
    to_world = cam_pose.inverse()
    return [
        MapObject(-1, d.class_label, d.box.transformed(to_world), n_match=1, n_skip=0)
        for d in dets
        if d.confidence >= min_confidence
    ]


def ingest_frame(local: LocalMap, dets: Sequence[Detection3D], cam_pose: Pose3,
                 cam: CameraModel, plan: Optional[FloorPlan], cfg: MapperConfig,
                 models=None, robot_pose: Optional[Pose2] = None) -> LocalMap:
    """Associate one frame of camera-frame detections into the local map."""
    new = detections_to_world(dets, cam_pose, cfg.min_confidence)
    if cfg.gate_detections:
        new = [o for o in new if is_visible(o.box, cam_pose, cam, plan)]
    if local.anchor_pose is None and robot_pose is not None:
        local.anchor_pose = robot_pose
    update_active(local, cam_pose, cam, plan)
    actives = [o for o in local if o.active]
    pairs, un_act, un_new = associate(actives, new, cfg, models)
    for i, j in pairs:
        merge(actives[i], new[j])
    for i in un_act:
        actives[i].n_skip += 1
    for j in un_new:
        o = new[j]
        local.add(o.class_label, o.box, n_match=o.n_match, n_skip=0)
    return local


def should_integrate(local: LocalMap, robot_pose: Pose2, cfg: MapperConfig) -> bool:
    a = local.anchor_pose
    if a is None:
        return False
    dxy = math.hypot(robot_pose.x - a.x, robot_pose.y - a.y)
    dth = abs(Pose2(0, 0, robot_pose.theta - a.theta).theta)
    return dxy > cfg.d_xy or dth > cfg.d_theta


def purge(omap: ObjectMap, cfg: MapperConfig) -> list[int]:
    """Drop objects with ``n_match / n_skip < tau_purge``; returns removed ids."""
    gone = [o.id for o in omap if o.n_skip > 0 and o.n_match / o.n_skip < cfg.tau_purge]
    for i in gone:
        omap.remove(i)
    return gone


def fuse_duplicates(objs: Sequence[MapObject], omap: ObjectMap, cfg: MapperConfig,
                    models=None) -> list[tuple[int, int]]:
    """Merge pairs of map objects whose mutual cost is below ``tau_cost``.

    The cheapest pair is fused first (the object with fewer matches folds
    into the other, which keeps its skip count) until no pair qualifies.
    Same-class objects only reach a cost below 0.5 when their boxes overlap,
    so distinct neighbours are left alone.  Returns ``(kept, removed)`` pairs.
    """
    live = sorted(objs, key=lambda o: o.id)
    fused = []
    while len(live) > 1:
        best = None
        for i, a in enumerate(live):
            for b in live[i + 1:]:
                c = association_cost(a, b, models)
                if c is None or c >= cfg.tau_cost:
                    continue
                c2 = association_cost(b, a, models)
                c = max(c, c2)
                if c < cfg.tau_cost and (best is None or c < best[0]):
                    best = (c, a, b)
        if best is None:
            break
        _, a, b = best
        keep, drop = (a, b) if (a.n_match, -a.id) >= (b.n_match, -b.id) else (b, a)
        merge(keep, drop)
        omap.remove(drop.id)
        live.remove(drop)
        fused.append((keep.id, drop.id))
    return fused


def integrate(local: LocalMap, glob: ObjectMap, robot_pose: Pose2, cfg: MapperConfig,
              rooms: Optional[RoomMap] = None, models=None) -> tuple[LocalMap, ObjectMap, dict]:
    """Merge the local map into the global map, gated by the robot's room.

    Only global objects in the robot's current room are merge candidates;
    unmatched local objects become new global objects tagged with their
    own room.  Purging runs afterwards.  Returns the cleared local map, the
    updated global map and an event record.
    """
    robot_room = int(rooms.room_at([robot_pose.x, robot_pose.y])) if rooms is not None else 0
    locs = sorted(local, key=lambda o: o.id)
    for o in locs:
        o.room_id = rooms.nearest_room(o.box.center[:2]) if rooms is not None else 0
    cands = [g for g in sorted(glob, key=lambda o: o.id) if g.room_id == robot_room]
    pairs, _, un_loc = associate(cands, locs, cfg, models)
    merged = []
    for i, j in pairs:
        merge(cands[i], locs[j])
        merged.append(cands[i].id)
    added = []
    for j in un_loc:
        o = locs[j]
        g = glob.add(o.class_label, o.box, n_match=o.n_match, n_skip=o.n_skip, room_id=o.room_id)
        added.append(g.id)
    fused = []
    if cfg.fuse_duplicates:
        fused = fuse_duplicates([g for g in glob if g.room_id == robot_room], glob, cfg, models)
    purged = purge(glob, cfg)
    local.clear()
    local.anchor_pose = robot_pose
    event = {"robot_pose": robot_pose.to_list(), "room": robot_room, "merged": merged,
             "added": added, "fused": [list(p) for p in fused], "purged": purged}
    return local, glob, event


@dataclass
class Mapper:
    """Single-writer owner of the local and global maps."""

    cam: CameraModel
    plan: Optional[FloorPlan] = None
    rooms: Optional[RoomMap] = None
    models: Optional[Mapping[str, ClassNoiseModel]] = None
    cfg: MapperConfig = field(default_factory=MapperConfig)
    global_map: ObjectMap = field(default_factory=ObjectMap)
    local: LocalMap = field(default_factory=LocalMap)
    events: list = field(default_factory=list)

    def process_frame(self, dets: Sequence[Detection3D], robot_pose: Pose2,
                      cam_pose: Pose3) -> None:
        ingest_frame(self.local, dets, cam_pose, self.cam, self.plan, self.cfg, self.models,
                     robot_pose)
        self._count_global_skips(dets, robot_pose, cam_pose)
        if should_integrate(self.local, robot_pose, self.cfg):
            self.integrate(robot_pose)

    def _count_global_skips(self, dets, robot_pose: Pose2, cam_pose: Pose3) -> None:
        # active global objects with no associated detection in this frame
        cands = sorted(self.global_map, key=lambda o: o.id)
        update_active(self.global_map, cam_pose, self.cam, self.plan, only=cands)
        actives = [g for g in cands if g.active]
        if not actives:
            return
        new = detections_to_world(dets, cam_pose, self.cfg.min_confidence)
        if self.cfg.gate_detections:
            new = [o for o in new if is_visible(o.box, cam_pose, self.cam, self.plan)]
        _, un_act, _ = associate(actives, new, self.cfg, self.models)
        for i in un_act:
            actives[i].n_skip += 1

    def integrate(self, robot_pose: Pose2) -> None:
        self.local, glob, event = integrate(self.local, self.global_map.copy(), robot_pose,
                                            self.cfg, self.rooms, self.models)
        # publish the updated map in one step
        self.global_map = glob
        self.events.append(event)

    def finish(self, robot_pose: Optional[Pose2] = None) -> ObjectMap:
        """Flush whatever is left in the local map."""
        if len(self.local):
            pose = robot_pose or self.local.anchor_pose or Pose2()
            self.integrate(pose)
        return self.global_map
