import numpy as np
import pytest

from semloc import simulator
from semloc.annotator import (
    Detection2D,
    GroundTruthObject,
    annotate_frame,
    ground_truth_map,
    load_ground_truth,
)
from semloc.geometry import BBox2, Pose2, project_box_to_image

from conftest import box

CAM = simulator.default_camera()
POSE = simulator.world_to_camera(Pose2(2.0, 2.5, 0.0), simulator.camera_extrinsic(0.0, 1.0))


def gt_objects():
    return [
        GroundTruthObject(0, "desk", box(4.0, 2.5, z=0.4, W=0.7, H=0.8, L=1.4)),
        GroundTruthObject(1, "plant", box(4.0, 1.6, z=0.5, W=0.4, H=1.0, L=0.4)),
        GroundTruthObject(2, "sofa", box(7.5, 0.9, z=0.4, W=0.9, H=0.8, L=1.8)),  # behind wall
    ]


def exact(g, cls=None, shift=0.0):
    bb, _ = project_box_to_image(g.box, POSE, CAM)
    return Detection2D(cls or g.class_label, BBox2(bb.xmin + shift, bb.ymin, bb.xmax + shift,
                                                   bb.ymax), 0.9)


def test_exact_detections_confirm_visible_objects(plan):
    gt = gt_objects()
    labels = annotate_frame(gt, POSE, CAM, [exact(g) for g in gt[:2]], plan)
    assert [lab.gt_id for lab in labels] == [0, 1]
    for lab, g in zip(labels, gt):
        assert lab.truncation == pytest.approx(0.0)
        assert lab.visibility == pytest.approx(1.0)
        back = lab.box_camera.transformed(POSE.inverse())
        assert np.allclose(back.center, g.box.center) and np.allclose(back.rotation, g.box.rotation)


def test_wall_occluded_object_gets_no_label(plan):
    gt = gt_objects()
    # a detection exactly where the occluded sofa would project is ignored
    labels = annotate_frame(gt, POSE, CAM, [exact(gt[2])], plan)
    assert labels == []
    # without a floor plan there is no occlusion reasoning
    assert [lab.gt_id for lab in annotate_frame(gt, POSE, CAM, [exact(gt[2])])] == [2]


def test_class_mismatch_and_threshold(plan):
    gt = gt_objects()
    assert annotate_frame(gt, POSE, CAM, [exact(gt[0], cls="sofa")], plan) == []
    shifted = exact(gt[0], shift=40.0)
    bb, _ = project_box_to_image(gt[0].box, POSE, CAM)
    iou = bb.iou(shifted.bbox)
    assert 0 < iou < 0.9
    assert annotate_frame(gt, POSE, CAM, [shifted], plan, tau_2d=iou + 0.01) == []
    lab = annotate_frame(gt, POSE, CAM, [shifted], plan, tau_2d=iou - 0.01)
    assert lab[0].visibility == pytest.approx(iou)


def test_one_detection_confirms_one_object(plan):
    a = GroundTruthObject(0, "desk", box(4.0, 2.5, z=0.4, W=0.7, H=0.8, L=1.4))
    b = GroundTruthObject(1, "desk", box(4.05, 2.5, z=0.4, W=0.7, H=0.8, L=1.4))
    labels = annotate_frame([a, b], POSE, CAM, [exact(b)], plan)
    assert [lab.gt_id for lab in labels] == [1]


def test_truncated_object():
    g = GroundTruthObject(0, "desk", box(4.0, 4.5, z=0.4, W=0.7, H=0.8, L=1.4))
    labels = annotate_frame([g], POSE, CAM, [exact(g)])
    assert len(labels) == 1 and 0 < labels[0].truncation < 1


def test_behind_camera_and_no_detections(plan):
    g = GroundTruthObject(0, "desk", box(0.8, 2.5, z=0.4))
    assert annotate_frame([g], POSE, CAM, [], plan) == []
    assert annotate_frame(gt_objects(), POSE, CAM, [], plan) == []


def test_ground_truth_io(tmp_path):
    gt = gt_objects()
    ground_truth_map(gt).save(tmp_path / "gt.json")
    back = load_ground_truth(tmp_path / "gt.json")
    assert [(g.id, g.class_label) for g in back] == [(g.id, g.class_label) for g in gt]
    assert back[0].box == gt[0].box


def test_label_dict_fields(plan):
    gt = gt_objects()
    d = annotate_frame(gt, POSE, CAM, [exact(gt[0])], plan)[0].to_dict()
    assert set(d) >= {"gt_id", "class", "center", "dims", "rotation", "bbox2d", "truncation",
                      "visibility"}
