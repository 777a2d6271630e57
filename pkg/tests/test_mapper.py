import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc import simulator
from semloc.geometry import Pose2
from semloc.mapper import (
    FORBIDDEN_COST,
    Detection3D,
    LocalMap,
    Mapper,
    MapperConfig,
    associate,
    association_cost,
    detections_to_world,
    fuse_duplicates,
    hungarian,
    ingest_frame,
    integrate,
    is_visible,
    merge,
    purge,
    should_integrate,
)
from semloc.noisemodel import ClassNoiseModel
from semloc.worldmodel import ObjectMap, segment_rooms

from conftest import box, obj

CAM = simulator.default_camera()
EXT = simulator.camera_extrinsic(0.0, 1.0)
MODELS = {"desk": ClassNoiseModel("desk", [0.0, 0.0], np.eye(2) * 0.01, 10)}


def cam_at(x, y, th=0.0):
    return simulator.world_to_camera(Pose2(x, y, th), EXT)


def det_of(o, cam_pose):
    return Detection3D(o.class_label, 0.9, o.box.transformed(cam_pose))


def brute_force(C):
    n, m = C.shape
    if n <= m:
        return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return brute_force(C.T)


@settings(max_examples=150)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_hungarian_is_optimal(n, m, seed):
    C = np.random.default_rng(seed).random((n, m))
    pairs = hungarian(C)
    assert len(pairs) == min(n, m)
    assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
    assert sum(C[i, j] for i, j in pairs) == pytest.approx(brute_force(C))


def test_hungarian_edge_cases():
    assert hungarian(np.zeros((0, 3))) == []
    assert hungarian([[5.0]]) == [(0, 0)]
    # integer ties resolve to an optimal assignment
    pairs = hungarian(np.ones((3, 3)))
    assert sorted(i for i, _ in pairs) == [0, 1, 2]
    with pytest.raises(ValueError):
        hungarian([1.0, 2.0])


def test_association_cost_rules():
    a, b = obj(0, "desk", 0, 0), obj(1, "desk", 0.1, 0)
    assert association_cost(a, obj(1, "sofa", 0, 0)) is None
    iou_only = association_cost(a, b)
    assert iou_only == pytest.approx(1 - 0.9 / 1.1)
    with_model = association_cost(a, b, MODELS)
    cen = 1 - math.exp(-0.5 * 0.01 / 0.01)
    assert with_model == pytest.approx(0.5 * (iou_only + cen))
    assert association_cost(a, a, MODELS) == pytest.approx(0.0)


def test_associate_post_filters_by_threshold():
    a = [obj(0, "desk", 0, 0), obj(1, "desk", 5, 0), obj(2, "sofa", 9, 0)]
    b = [obj(0, "desk", 0.05, 0), obj(1, "desk", 5.9, 0), obj(2, "desk", 9, 0)]
    pairs, ua, ub = associate(a, b, MapperConfig(), MODELS)
    assert pairs == [(0, 0)]
    assert ua == [1, 2] and ub == [1, 2]


def test_forbidden_cost_never_accepted():
    C = np.array([[FORBIDDEN_COST]])
    assert associate([None], [None], MapperConfig(), C=C)[0] == []


def test_merge_is_match_weighted():
    t = obj(0, "desk", 0.0, 0.0)
    t.n_match = 3
    p = obj(1, "desk", 0.4, 0.0, W=2.0, yaw=0.4)
    merge(t, p)
    assert t.n_match == 4
    assert np.allclose(t.box.center, [0.1, 0.0, 0.5])
    assert t.box.dims[0] == pytest.approx(1.25)
    assert 0 < math.atan2(t.box.rotation[1, 0], t.box.rotation[0, 0]) < 0.2
    with pytest.raises(ValueError):
        merge(t, obj(2, "sofa", 0, 0))


def test_merge_degenerate_rotation_keeps_target():
    t = obj(0, "desk", 0, 0)
    merge(t, obj(1, "desk", 0, 0, yaw=math.pi))
    assert np.allclose(t.box.rotation, np.eye(3))


def test_detections_to_world_roundtrip():
    cp = cam_at(1.0, 2.0, 0.3)
    o = obj(0, "desk", 3.0, 2.5, yaw=0.2)
    w = detections_to_world([det_of(o, cp)], cp)[0]
    assert np.allclose(w.box.center, o.box.center) and np.allclose(w.box.rotation, o.box.rotation)
    assert detections_to_world([Detection3D("desk", 0.1, o.box)], cp, min_confidence=0.5) == []
    d = det_of(o, cp)
    assert Detection3D.from_dict(d.to_dict()) == d


def test_is_visible_frustum_and_walls(plan):
    cp = cam_at(2.0, 2.5)
    assert is_visible(box(4.0, 2.5), cp, CAM, plan)
    assert not is_visible(box(0.5, 2.5), cp, CAM, plan)  # behind
    assert not is_visible(box(7.5, 0.8, W=0.6, L=0.6), cp, CAM, plan)  # behind the wall
    assert is_visible(box(7.5, 0.8, W=0.6, L=0.6), cp, CAM, None)
    # a box straddling the wall is not hidden by the wall cells under it
    assert is_visible(box(5.05, 1.2, W=0.6, L=0.6), cp, CAM, plan)


def test_ingest_merges_repeats_and_counts_skips(plan):
    local = LocalMap()
    cp = cam_at(2.0, 2.5)
    a, b = obj(0, "desk", 4.0, 2.5), obj(1, "desk", 4.0, 1.2)
    cfg = MapperConfig()
    ingest_frame(local, [det_of(a, cp), det_of(b, cp)], cp, CAM, plan, cfg, MODELS, Pose2(2, 2.5))
    assert len(local) == 2 and local.anchor_pose == Pose2(2, 2.5)
    ingest_frame(local, [det_of(a, cp)], cp, CAM, plan, cfg, MODELS)
    n = sorted((o.n_match, o.n_skip) for o in local)
    assert n == [(1, 1), (2, 0)]


def test_ingest_gates_impossible_detections(plan):
    cp = cam_at(2.0, 2.5)
    hidden = obj(0, "desk", 7.5, 0.8, W=0.6, L=0.6)
    local = ingest_frame(LocalMap(), [det_of(hidden, cp)], cp, CAM, plan, MapperConfig())
    assert len(local) == 0
    local = ingest_frame(LocalMap(), [det_of(hidden, cp)], cp, CAM, plan,
                         MapperConfig(gate_detections=False))
    assert len(local) == 1


def test_should_integrate_thresholds():
    local = LocalMap(anchor_pose=Pose2(0, 0, 0))
    cfg = MapperConfig()
    assert not should_integrate(LocalMap(), Pose2(5, 5, 0), cfg)
    assert not should_integrate(local, Pose2(0.05, 0, 0.02), cfg)
    assert should_integrate(local, Pose2(0.11, 0, 0), cfg)
    assert should_integrate(local, Pose2(0, 0, 0.04), cfg)


def test_purge_rule():
    m = ObjectMap([obj(0, "desk", 0, 0, ), obj(1, "desk", 3, 0), obj(2, "desk", 6, 0)])
    m[0].n_match, m[0].n_skip = 1, 6   # 0.167 < 0.2
    m[1].n_match, m[1].n_skip = 2, 10  # exactly 0.2 stays
    m[2].n_match, m[2].n_skip = 1, 0
    assert purge(m, MapperConfig(tau_purge=0.2)) == [0]
    assert sorted(o.id for o in m) == [1, 2]


def test_integrate_gates_by_room(plan):
    rooms = segment_rooms(plan, erosion_radius=0.7)
    glob = ObjectMap([obj(0, "desk", 4.0, 2.5), obj(1, "desk", 6.0, 2.5)])
    for g in glob:
        g.room_id = rooms.room_at(g.box.center[:2])
    local = LocalMap([obj(0, "desk", 6.05, 2.5)])
    # robot in the left room: the right-room desk is not a candidate
    local, glob2, ev = integrate(local, glob.copy(), Pose2(2, 2.5), MapperConfig(fuse_duplicates=False),
                                 rooms, MODELS)
    assert ev["merged"] == [] and len(ev["added"]) == 1 and len(glob2) == 3
    assert len(local) == 0 and local.anchor_pose == Pose2(2, 2.5)
    local = LocalMap([obj(0, "desk", 6.05, 2.5)])
    _, glob3, ev = integrate(local, glob.copy(), Pose2(8, 2.5), MapperConfig(), rooms, MODELS)
    assert ev["merged"] == [1] and glob3[1].n_match == 2


def test_fuse_duplicates_merges_overlapping_only():
    m = ObjectMap([obj(0, "desk", 0, 0), obj(1, "desk", 0.05, 0), obj(2, "desk", 3, 0)])
    m[1].n_match = 5
    fused = fuse_duplicates(list(m), m, MapperConfig(), MODELS)
    assert fused == [(1, 0)]
    assert sorted(o.id for o in m) == [1, 2] and m[1].n_match == 6


def test_mapper_end_to_end_noiseless(small_world):
    w = small_world
    traj = simulator.coverage_trajectory(w)
    rig = simulator.default_rig()
    recs = simulator.mapping_stream(w, traj, CAM, rig, simulator.DetectorSpec(center_noise=False),
                                    0, every=10)
    m = Mapper(CAM, w.plan, segment_rooms(w.plan), None)
    for r in recs:
        m.process_frame([Detection3D.from_dict(d) for d in r["detections"]],
                        Pose2.from_list(r["robot_pose"]),
                        simulator.Pose3.from_dict(r["cam_pose"]))
    gm = m.finish()
    assert len(gm) == len(w.gt_objects)
    assert m.events and all(set(e) >= {"merged", "added", "purged"} for e in m.events)


def test_mapper_config_validation():
    with pytest.raises(ValueError):
        MapperConfig(tau_cost=0.0)
    with pytest.raises(ValueError):
        MapperConfig(tau_cost=1.5)
