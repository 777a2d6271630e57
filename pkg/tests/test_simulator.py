import math

import numpy as np
import pytest

from semloc import simulator as S
from semloc.geometry import Pose2, footprint, footprint_intersection_area
from semloc.mapper import Detection3D, camera_position, detections_to_world
from semloc.noisemodel import collect_samples

CAM = S.default_camera()


def test_world_is_deterministic_and_valid(small_world):
    w2 = S.generate_world(0, S.WorldSpec(n_objects=10), small_world.class_noise)
    assert [g.box for g in w2.gt_objects] == [g.box for g in small_world.gt_objects]
    assert np.array_equal(w2.plan.grid, small_world.plan.grid)
    fps = [footprint(g.box) for g in small_world.gt_objects]
    assert len(fps) == 10
    for i, a in enumerate(fps):
        assert small_world.plan.is_free(a.corners()).all()
        for b in fps[i + 1:]:
            assert footprint_intersection_area(a, b) == 0.0
    assert len(small_world.rooms) == 2 and len(small_world.doors) == 1


def test_different_seeds_differ(small_world):
    w = S.generate_world(1, S.WorldSpec(n_objects=10))
    assert [g.box for g in w.gt_objects] != [g.box for g in small_world.gt_objects]


def test_placement_failure():
    with pytest.raises(S.PlacementFailure):
        S.generate_world(0, S.WorldSpec(rooms_x=1, room_size=(3.0, 3.0), n_objects=40,
                                        max_tries=50))


def test_detector_spec_validation():
    for kw in ({"p_detect": 1.5}, {"fp_rate": -1}, {"fp_mode": "x"}, {"bias_fraction": 2},
               {"per_class_p_detect": {"desk": 3}}):
        with pytest.raises(ValueError):
            S.DetectorSpec(**kw)
    assert S.DetectorSpec(p_detect=0.5, per_class_p_detect={"desk": 0.1}).p("desk") == 0.1


def test_rig_and_world_to_camera():
    rig = S.default_rig(4)
    assert len(rig) == 4
    pose = Pose2(2.0, 1.0, 0.5)
    cp = S.world_to_camera(pose, rig[0])
    assert np.allclose(camera_position(cp), [2.0, 1.0, 1.0])
    # optical axis of the front camera points along the robot heading
    axis = cp.rotation.T @ np.array([0.0, 0.0, 1.0])
    assert np.allclose(axis, [math.cos(0.5), math.sin(0.5), 0.0])


def test_coverage_trajectory(small_world):
    tr = S.coverage_trajectory(small_world)
    assert np.all(np.diff(tr.timestamps) > 0)
    xy = np.array([[p.x, p.y] for p in tr.poses])
    assert small_world.plan.is_free(xy).all()
    assert {small_world.rooms.index(r) for r in small_world.rooms
            if any(r[0] <= x <= r[2] and r[1] <= y <= r[3] for x, y in xy)} == {0, 1}
    steps = np.hypot(*np.diff(xy, axis=0).T)
    assert steps.max() <= 0.5 * 0.1 + 1e-9
    with pytest.raises(ValueError):
        S.SimTrajectory(np.array([0.0, 0.0]), [Pose2(), Pose2()])


def test_localization_trajectory_is_seeded(small_world):
    a = S.localization_trajectory(small_world, 3)
    b = S.localization_trajectory(small_world, 3)
    c = S.localization_trajectory(small_world, 4)
    assert a.poses == b.poses and a.poses != c.poses


def test_noiseless_detections_are_exact(small_world):
    tr = S.coverage_trajectory(small_world)
    ext = S.default_rig()[0]
    seen = 0
    for k in range(0, len(tr), 40):
        cp = S.world_to_camera(tr.poses[k], ext)
        dets = S.simulate_detections(small_world, tr.poses[k], CAM, ext, k,
                                     S.DetectorSpec(center_noise=False))
        for o in detections_to_world(dets, cp):
            assert any(np.allclose(o.box.center, g.box.center) and g.class_label == o.class_label
                       for g in small_world.gt_objects)
            seen += 1
    assert seen > 0


def test_p_detect_zero_and_false_positive_rate(small_world):
    pose = S.coverage_trajectory(small_world).poses[0]
    ext = S.default_rig()[0]
    det = S.DetectorSpec(p_detect=0.0, fp_rate=0.5)
    counts = [len(S.simulate_detections(small_world, pose, CAM, ext, s, det)) for s in range(2000)]
    assert np.mean(counts) == pytest.approx(0.5, abs=0.05)
    det = S.DetectorSpec(p_detect=0.0, fp_rate=0.0)
    assert S.simulate_detections(small_world, pose, CAM, ext, 0, det) == []


def test_false_positive_classes_and_free_space(small_world):
    pose = S.coverage_trajectory(small_world).poses[0]
    ext = S.default_rig()[0]
    cp = S.world_to_camera(pose, ext)
    det = S.DetectorSpec(p_detect=0.0, fp_rate=3.0)
    fps = []
    for s in range(50):
        fps += detections_to_world(S.simulate_detections(small_world, pose, CAM, ext, s, det), cp)
    assert {o.class_label for o in fps} <= set(small_world.classes)
    assert small_world.plan.is_free(np.array([o.box.center[:2] for o in fps])).all()


def test_center_noise_marginal_matches_class_model():
    # one object seen from one spot many times: offsets follow the class Gaussian
    spec = S.WorldSpec(rooms_x=1, n_objects=1)
    mean, cov = np.array([0.1, 0.0]), np.diag([0.04, 0.01])
    w = S.generate_world(2, spec, S.default_noise(spec.classes, mean, cov))
    g = w.gt_objects[0]
    yaw = footprint(g.box).yaw
    # stand 2.5 m in front of the object, facing it
    n = np.array([-math.sin(yaw), math.cos(yaw)])
    xy = g.box.center[:2] + 2.5 * n
    pose = Pose2(xy[0], xy[1], math.atan2(-n[1], -n[0]))
    ext = S.default_rig()[0]
    cp = S.world_to_camera(pose, ext)
    det = S.DetectorSpec()
    preds = []
    for s in range(4000):
        preds += detections_to_world(S.simulate_detections(w, pose, CAM, ext, s, det), cp)
    assert len(preds) == 4000
    off = np.array([s.offset for s in collect_samples(preds, [g.to_map_object()])])
    assert np.allclose(off.mean(axis=0), mean, atol=0.01)
    assert np.allclose(np.cov(off.T), cov, atol=0.004)


def test_persistent_bias_keeps_marginal_covariance():
    # across objects (bias seeds) the offset spread is still the class covariance
    spec = S.WorldSpec(rooms_x=1, n_objects=1)
    cov = np.diag([0.04, 0.01])
    w = S.generate_world(2, spec, S.default_noise(spec.classes, (0, 0), cov))
    g = w.gt_objects[0]
    m = w.class_noise[g.class_label]
    rng = np.random.default_rng(0)
    offs = []
    for b in range(3000):
        det = S.DetectorSpec(bias_fraction=0.9, bias_seed=b)
        c = S._noisy_box(g, m, det, rng).center[:2] - g.box.center[:2]
        offs.append(np.linalg.inv(S.rot2(footprint(g.box).yaw)) @ c)
    assert np.allclose(np.cov(np.array(offs).T), cov, atol=0.004)
    # within one object most of the spread is the fixed bias
    same = [S._noisy_box(g, m, S.DetectorSpec(bias_fraction=0.9, bias_seed=7), rng).center[:2]
            for _ in range(2000)]
    assert np.cov(np.array(same).T).trace() == pytest.approx(0.1 * cov.trace(), rel=0.15)


def test_min_visible_fraction_suppresses_edge_objects(small_world):
    tr = S.coverage_trajectory(small_world)
    ext = S.default_rig()[0]
    loose, strict = 0, 0
    for k in range(0, len(tr), 7):
        loose += len(S.simulate_detections(small_world, tr.poses[k], CAM, ext, k,
                                           S.DetectorSpec(center_noise=False)))
        strict += len(S.simulate_detections(small_world, tr.poses[k], CAM, ext, k,
                                            S.DetectorSpec(center_noise=False,
                                                           min_visible_fraction=0.9)))
    assert strict < loose


def test_odometry_and_streams_are_deterministic(small_world):
    tr = S.localization_trajectory(small_world, 0)
    det = S.DetectorSpec(p_detect=0.8, fp_rate=0.2)
    rig = S.default_rig()
    a = S.localization_stream(small_world, tr, CAM, rig, det, (0.15, 0.15, 0.15), 5)
    b = S.localization_stream(small_world, tr, CAM, rig, det, (0.15, 0.15, 0.15), 5)
    assert a == b
    ts = [e["timestamp_s"] for e in a]
    assert ts == sorted(ts)
    assert sum(e["type"] == "odom" for e in a) == len(tr) - 1
    assert sum(e["type"] == "obs" for e in a) == 4 * len(range(0, len(tr), 5))
    odo = S.corrupt_odometry(tr, (0.0, 0.0, 0.0), 1)
    p = tr.poses[0]
    for e in odo:
        p = p.compose(Pose2.from_list(e["delta"]))
    assert np.allclose(p.as_array(), tr.poses[-1].as_array(), atol=1e-9)


def test_mapping_stream_records(small_world):
    tr = S.coverage_trajectory(small_world)
    recs = S.mapping_stream(small_world, tr, CAM, S.default_rig(2), S.DetectorSpec(), 0, every=50)
    assert recs[0]["frame_id"] == "000000_0" and recs[1]["frame_id"] == "000000_1"
    assert len(recs) == 2 * len(range(0, len(tr), 50))
    for r in recs[:4]:
        [Detection3D.from_dict(d) for d in r["detections"]]
    # a scene callback can remove everything
    empty = S.mapping_stream(small_world, tr, CAM, S.default_rig(1), S.DetectorSpec(), 0,
                             every=50, scene=lambda k: [])
    assert all(r["detections"] == [] for r in empty)
    recs = S.trajectory_records(tr)
    assert recs[0]["pose"] == tr.poses[0].to_list()


def test_detections_2d(small_world):
    tr = S.coverage_trajectory(small_world)
    cp = S.world_to_camera(tr.poses[0], S.default_rig()[0])
    d = S.simulate_detections_2d(small_world, cp, CAM, np.random.default_rng(0))
    for x in d:
        assert 0 <= x.bbox.xmin <= x.bbox.xmax <= CAM.image_width
        assert 0 <= x.bbox.ymin <= x.bbox.ymax <= CAM.image_height
