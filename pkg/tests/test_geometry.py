import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc.geometry import (
    BBox2,
    BehindCamera,
    CameraModel,
    DegenerateMean,
    Footprint2,
    FullyBehind,
    GeometryError,
    OrientedBox3,
    Pose2,
    Pose3,
    box_yaw,
    footprint,
    in_frustum_fraction,
    iou_box3,
    iou_footprint,
    project_box_to_image,
    project_point,
    rotation_average,
    rpy_matrix,
    wrap_angle,
    yaw_matrix,
)

from conftest import box

coord = st.floats(-10, 10, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
ext = st.floats(0.05, 3.0, allow_nan=False)

CAM = CameraModel.from_fov(math.radians(90), 640, 480)
# camera at the origin looking along +x (z forward, x right, y down)
LOOK_X = Pose3(np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), np.zeros(3))


@given(angle)
def test_wrap_angle_range(a):
    w = wrap_angle(a + 6 * math.pi)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


@given(coord, coord, angle, coord, coord, angle)
def test_pose2_group(x1, y1, t1, x2, y2, t2):
    a, b = Pose2(x1, y1, t1), Pose2(x2, y2, t2)
    ident = a.compose(a.inverse())
    assert np.allclose(ident.as_array(), 0, atol=1e-9)
    back = a.compose(a.between(b))
    assert np.allclose(back.as_array()[:2], b.as_array()[:2], atol=1e-9)
    assert abs(wrap_angle(back.theta - b.theta)) < 1e-9


@given(angle, angle, angle, coord, coord, coord)
def test_pose3_inverse(r, p, y, tx, ty, tz):
    T = Pose3(rpy_matrix(r, p, y), [tx, ty, tz])
    I = T.compose(T.inverse())
    assert np.allclose(I.matrix(), np.eye(4), atol=1e-9)
    assert Pose3.from_dict(T.to_dict()) == T


def test_pose3_rejects_non_rotation():
    with pytest.raises(GeometryError):
        Pose3(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(GeometryError):
        Pose3(2 * np.eye(3))


def test_pose2_to_pose3_matches_planar_transform():
    p = Pose2(1.0, 2.0, 0.7)
    pts = np.array([[0.3, -0.2], [1.0, 1.0]])
    a = p.transform_points(pts)
    b = p.to_pose3().apply(np.column_stack([pts, np.zeros(2)]))[:, :2]
    assert np.allclose(a, b)


def test_box_dims_convention():
    b = OrientedBox3([0, 0, 0], [2.0, 1.0, 4.0])  # W=2 along x, H=1 up, L=4 along y
    c = b.corners()
    assert np.allclose(c.max(axis=0), [1.0, 2.0, 0.5])
    fp = footprint(b)
    assert (fp.half_width, fp.half_length) == (1.0, 2.0)


def test_box_rejects_bad_dims():
    with pytest.raises(GeometryError):
        OrientedBox3([0, 0, 0], [1, 0, 1])


@given(angle)
def test_box_yaw_recovers_yaw(y):
    assert abs(wrap_angle(box_yaw(yaw_matrix(y)) - y)) < 1e-9


def test_box_yaw_falls_back_when_x_axis_vertical():
    # local x points straight up, local y lies in the ground plane
    R = rpy_matrix(0.0, -math.pi / 2, 0.0)
    assert abs(R[2, 0] - 1.0) < 1e-12
    y = box_yaw(R)
    assert abs(wrap_angle(math.atan2(R[1, 1], R[0, 1]) - math.pi / 2 - y)) < 1e-9


def test_iou_footprint_basic_cases():
    a = Footprint2(0, 0, 1, 1)
    assert iou_footprint(a, a) == pytest.approx(1.0)
    assert iou_footprint(a, Footprint2(5, 0, 1, 1)) == 0.0
    # half overlap along x: inter 2, union 6
    assert iou_footprint(a, Footprint2(1, 0, 1, 1)) == pytest.approx(1 / 3)
    # 45 deg rotated square of equal area: inter = octagon 8(sqrt2 - 1)
    oct_area = 8 * (math.sqrt(2) - 1)
    assert iou_footprint(a, Footprint2(0, 0, 1, 1, math.pi / 4)) == pytest.approx(
        oct_area / (8 - oct_area))


@settings(max_examples=200)
@given(coord, coord, ext, ext, angle, coord, coord, ext, ext, angle)
def test_iou_footprint_properties(x1, y1, w1, l1, t1, x2, y2, w2, l2, t2):
    a, b = Footprint2(x1, y1, w1, l1, t1), Footprint2(x2, y2, w2, l2, t2)
    v = iou_footprint(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_footprint(b, a), abs=1e-9)
    # rigid motion of both leaves IoU unchanged
    T = Pose2(0.4, -1.1, 0.9)
    def moved(f):
        c = T.transform_points([[f.cx, f.cy]])[0]
        return Footprint2(c[0], c[1], f.half_width, f.half_length, f.yaw + T.theta)
    assert iou_footprint(moved(a), moved(b)) == pytest.approx(v, abs=1e-9)


def test_iou_box3_vertical_factor():
    a = box(0, 0, z=0.5, H=1.0)
    b = box(0, 0, z=1.0, H=1.0)
    assert iou_box3(a, b) == pytest.approx(0.5 / 1.5)
    assert iou_box3(a, box(0, 0, z=3.0)) == 0.0
    assert iou_box3(a, a) == pytest.approx(1.0)


def test_project_point_center_and_behind():
    uv = project_point([2.0, 0.0, 0.0], LOOK_X, CAM)
    assert np.allclose(uv, [320, 240])
    uv = project_point([2.0, -1.0, 0.0], LOOK_X, CAM)  # robot's right -> image right
    assert uv[0] > 320
    with pytest.raises(BehindCamera):
        project_point([-1.0, 0.0, 0.0], LOOK_X, CAM)


def test_project_box_to_image():
    bb, frac = project_box_to_image(box(3, 0, z=0.0), LOOK_X, CAM)
    assert frac == 1.0
    assert bb.xmin < 320 < bb.xmax and bb.ymin < 240 < bb.ymax
    assert (bb.xmin + bb.xmax) / 2 == pytest.approx(320)
    with pytest.raises(FullyBehind):
        project_box_to_image(box(-3, 0, z=0.0), LOOK_X, CAM)
    # a box straddling the image plane still yields a clipped hull
    bb, frac = project_box_to_image(box(0.2, 0, z=0.0, W=2, L=2), LOOK_X, CAM)
    assert 0 < frac < 1 and bb.area() > 0


def test_in_frustum_fraction_partial():
    assert in_frustum_fraction(box(3, 0, z=0), LOOK_X, CAM) == 1.0
    assert in_frustum_fraction(box(-3, 0, z=0), LOOK_X, CAM) == 0.0
    # centered on the left edge of the 90 deg view
    f = in_frustum_fraction(box(3, 3, z=0), LOOK_X, CAM)
    assert 0.2 < f < 0.8


def test_bbox2_iou():
    a = BBox2(0, 0, 2, 2)
    assert a.iou(BBox2(1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert a.iou(BBox2(5, 5, 6, 6)) == 0.0
    with pytest.raises(GeometryError):
        BBox2(1, 0, 0, 1)


def test_camera_model_validation_and_roundtrip():
    assert CameraModel.from_dict(CAM.to_dict()).intrinsics.tolist() == CAM.intrinsics.tolist()
    with pytest.raises(GeometryError):
        CameraModel(np.diag([-1.0, 1.0, 1.0]), 10, 10)


def test_rotation_average_cases():
    R = rpy_matrix(0.1, 0.2, 0.3)
    assert np.allclose(rotation_average([R]), R)
    m = rotation_average([yaw_matrix(0.2), yaw_matrix(0.6)])
    assert np.allclose(m, yaw_matrix(0.4))
    m = rotation_average([yaw_matrix(0.0), yaw_matrix(1.0)], [3.0, 1.0])
    assert 0 < box_yaw(m) < 0.5
    with pytest.raises(DegenerateMean):
        rotation_average([yaw_matrix(0.0), yaw_matrix(math.pi)])
    with pytest.raises(ValueError):
        rotation_average([R, R], [1.0, -1.0])


@given(st.lists(angle, min_size=1, max_size=6))
def test_rotation_average_is_rotation(yaws):
    Rs = [yaw_matrix(y) for y in yaws]
    try:
        M = rotation_average(Rs)
    except DegenerateMean:
        return
    assert np.allclose(M @ M.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(M) == pytest.approx(1.0)
