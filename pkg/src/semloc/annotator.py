"""3D label generation from an annotated world, posed frames and 2D detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .geometry import (
    BBox2,
    CameraModel,
    FullyBehind,
    OrientedBox3,
    Pose3,
    in_frustum_fraction,
    project_box_to_image,
)
from .worldmodel import FloorPlan, MapObject, ObjectMap, line_of_sight

DEFAULT_TAU_2D = 0.25


@dataclass(frozen=True)
class GroundTruthObject:
    id: int
    class_label: str
    box: OrientedBox3

    @classmethod
    def from_map_object(cls, o: MapObject) -> "GroundTruthObject":
        return cls(o.id, o.class_label, o.box)

    def to_map_object(self) -> MapObject:
        return MapObject(self.id, self.class_label, self.box)


def load_ground_truth(path) -> list[GroundTruthObject]:
    return [GroundTruthObject.from_map_object(o) for o in sorted(ObjectMap.load(path),
                                                                 key=lambda o: o.id)]


def ground_truth_map(gt: Sequence[GroundTruthObject]) -> ObjectMap:
    return ObjectMap(g.to_map_object() for g in gt)


@dataclass(frozen=True)
class Detection2D:
    class_label: str
    bbox: BBox2
    confidence: float = 1.0

    @classmethod
    def from_dict(cls, d) -> "Detection2D":
        return cls(str(d["class"]), BBox2(*[float(v) for v in d["bbox"]]),
                   float(d.get("confidence", 1.0)))

    def to_dict(self) -> dict:
        return {"class": self.class_label, "bbox": self.bbox.to_list(),
                "confidence": float(self.confidence)}


@dataclass(frozen=True)
class FrameLabel:
    gt_id: int
    class_label: str
    box_camera: OrientedBox3
    bbox2d: BBox2
    truncation: float
    visibility: float

    def to_dict(self) -> dict:
        return {
            "gt_id": int(self.gt_id),
            "class": self.class_label,
            "center": [float(v) for v in self.box_camera.center],
            "dims": [float(v) for v in self.box_camera.dims],
            "rotation": [float(v) for v in self.box_camera.rotation.ravel()],
            "bbox2d": self.bbox2d.to_list(),
            "truncation": float(self.truncation),
            "visibility": float(self.visibility),
        }


def box_world_to_camera(box: OrientedBox3, cam_pose: Pose3) -> OrientedBox3:
    return box.transformed(cam_pose)


def annotate_frame(gt: Sequence[GroundTruthObject], cam_pose: Pose3, cam: CameraModel,
                   det2d: Sequence[Detection2D], plan: Optional[FloorPlan] = None,
                   tau_2d: float = DEFAULT_TAU_2D) -> list[FrameLabel]:
    """Labels for the ground-truth objects confirmed by a 2D detection.

    An object is a candidate when part of it is in the frustum and the wall
    grid does not block the ray to its center.  Candidates are matched to
    same-class 2D detections greedily by descending IoU (at least
    ``tau_2d``); unconfirmed objects produce no label.
    """
    cam_xy = (-cam_pose.rotation.T @ cam_pose.translation)[:2]
    cands = []
    for g in gt:
        frac = in_frustum_fraction(g.box, cam_pose, cam)
        if frac <= 0:
            continue
        if plan is not None and not line_of_sight(plan, cam_xy, g.box.center[:2]):
            continue
        try:
            bbox, _ = project_box_to_image(g.box, cam_pose, cam)
        except FullyBehind:
            continue
        cands.append((g, bbox, frac))

    scored = []
    for ci, (g, bbox, _) in enumerate(cands):
        for di, d in enumerate(det2d):
            if d.class_label != g.class_label:
                continue
            iou = bbox.iou(d.bbox)
            if iou >= tau_2d and iou > 0:
                scored.append((-iou, ci, di))
    scored.sort()
    used_c, used_d, labels = set(), set(), []
    for neg_iou, ci, di in scored:
        if ci in used_c or di in used_d:
            continue
        used_c.add(ci)
        used_d.add(di)
        g, bbox, frac = cands[ci]
        labels.append(FrameLabel(g.id, g.class_label, box_world_to_camera(g.box, cam_pose),
                                 bbox, 1.0 - frac, -neg_iou))
    labels.sort(key=lambda lab: lab.gt_id)
    return labels
