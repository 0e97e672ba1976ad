import math

import numpy as np
import pytest

from rigidsynth.camgeo import (
    Intrinsics,
    InvalidInputError,
    PointCloud,
    Pose6DoF,
    backproject,
    compose,
    invert,
    project,
    rotation_angle_deg,
    transform_points,
    upsample_intrinsics,
)


def rot_oracle(rx, ry, rz):
    Rx = np.array([[1, 0, 0], [0, math.cos(rx), -math.sin(rx)], [0, math.sin(rx), math.cos(rx)]])
    Ry = np.array([[math.cos(ry), 0, math.sin(ry)], [0, 1, 0], [-math.sin(ry), 0, math.cos(ry)]])
    Rz = np.array([[math.cos(rz), -math.sin(rz), 0], [math.sin(rz), math.cos(rz), 0], [0, 0, 1]])
    return Rx @ Ry @ Rz


def random_pose(rng, rs=0.5, ts=1.0):
    return Pose6DoF(*rng.uniform(-rs, rs, 3), *rng.uniform(-ts, ts, 3))


def test_backproject_identity_case():
    K = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    pc = backproject(np.ones((4, 4)), K)
    assert np.array_equal(pc.points[0, 0], [0.0, 0.0, 1.0])


def test_backproject_hand_value(small_K):
    D = np.ones((8, 8))
    D[2, 3] = 10.0  # pixel x=3, y=2
    p = backproject(D, small_K).points[2, 3]
    assert np.allclose(p, [-0.05, -0.15, 10.0], atol=1e-12)
    uv, z, ok = project(PointCloud(p.reshape(1, 1, 3), np.ones((1, 1), bool)), small_K)
    assert np.allclose(uv[0, 0], [3.0, 2.0], atol=1e-9)


def test_backproject_rejects_zero_depth(small_K):
    D = np.ones((8, 8))
    D[0, 0] = 0.0
    with pytest.raises(InvalidInputError):
        backproject(D, small_K)


def test_transform_examples():
    pc = PointCloud(np.array([[[0.0, 0.0, 10.0]]]), np.ones((1, 1), bool))
    assert np.array_equal(transform_points(pc, Pose6DoF()).points, pc.points)
    assert np.allclose(transform_points(pc, Pose6DoF(tx=0.5)).points[0, 0], [0.5, 0.0, 10.0])
    pc1 = PointCloud(np.array([[[1.0, 0.0, 0.0]]]), np.ones((1, 1), bool))
    assert np.allclose(transform_points(pc1, Pose6DoF(rz=math.pi / 2)).points[0, 0], [0.0, 1.0, 0.0], atol=1e-12)


def test_rotation_matches_explicit_oracle(rng):
    for _ in range(20):
        a = rng.uniform(-1.2, 1.2, 3)
        assert np.allclose(Pose6DoF(*a).rotation, rot_oracle(*a), atol=1e-12)


def test_project_examples(small_K):
    K = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    uv, z, ok = project(PointCloud(np.array([[[0.0, 0.0, 1.0]]]), np.ones((1, 1), bool)), K)
    assert np.array_equal(uv[0, 0], [0.0, 0.0]) and z[0, 0] == 1.0 and ok[0, 0]
    uv, z, ok = project(PointCloud(np.array([[[0.5, 0.0, 10.0]]]), np.ones((1, 1), bool)), small_K)
    assert uv[0, 0, 0] == pytest.approx(8.5) and not ok[0, 0]


def test_project_behind_camera_is_invalid(small_K):
    uv, z, ok = project(PointCloud(np.array([[[0.0, 0.0, -1.0], [0.0, 0.0, 1e-3]]]), np.ones((1, 2), bool)), small_K)
    assert not ok.any()


def test_round_trip_pixel_grid(rng):
    K = Intrinsics(57.3, 61.0, 12.25, 7.75, 24, 16)
    D = rng.uniform(0.5, 40.0, (16, 24))
    uv, _, ok = project(backproject(D, K), K)
    ys, xs = np.mgrid[0:16, 0:24]
    assert ok.all()
    assert np.max(np.abs(uv[..., 0] - xs)) <= 1e-9 and np.max(np.abs(uv[..., 1] - ys)) <= 1e-9


def test_compose_invert_examples(rng):
    p = random_pose(rng)
    assert np.allclose(compose(Pose6DoF(), p).matrix(), p.matrix(), atol=1e-12)
    assert np.allclose(invert(Pose6DoF(tx=1, ty=2, tz=3)).translation, [-1, -2, -3])
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)


def test_group_laws(rng):
    for _ in range(20):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        l = compose(compose(a, b), c).matrix()
        r = compose(a, compose(b, c)).matrix()
        assert np.allclose(l, r, atol=1e-9)
        assert np.allclose(invert(invert(a)).matrix(), a.matrix(), atol=1e-9)
        assert np.allclose(compose(a, invert(a)).matrix(), np.eye(4), atol=1e-9)


def test_rigidity(rng):
    pts = rng.normal(size=(1, 30, 3)) * 5
    pc = PointCloud(pts, np.ones((1, 30), bool))
    out = transform_points(pc, random_pose(rng)).points[0]
    d0 = np.linalg.norm(pts[0][:, None] - pts[0][None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) <= 1e-9


def test_upsample_intrinsics_examples(rng):
    K = Intrinsics(100.0, 90.0, 3.5, 2.5, 8, 6)
    assert upsample_intrinsics(K, 1) == K
    K2 = upsample_intrinsics(K, 2)
    assert K2.fx == 200.0 and K2.cx == 7.0 and (K2.width, K2.height) == (16, 12)
    pts = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(2, 9, 20)]).reshape(1, 20, 3)
    pc = PointCloud(pts, np.ones((1, 20), bool))
    for a in (2, 3, 4):
        uv1, _, _ = project(pc, K)
        uva, _, _ = project(pc, upsample_intrinsics(K, a))
        assert np.max(np.abs(uva - a * uv1)) <= 1e-9
    with pytest.raises(InvalidInputError):
        upsample_intrinsics(K, 0)


def test_pose_json_and_matrix_round_trip(rng):
    for _ in range(20):
        p = random_pose(rng, rs=1.4)
        assert Pose6DoF.from_json(p.to_json()) == p
        q = Pose6DoF.from_matrix(p.matrix())
        assert np.allclose(q.matrix(), p.matrix(), atol=1e-9)


def test_gimbal_lock_extraction():
    p = Pose6DoF(0.3, math.pi / 2, 0.2)
    q = Pose6DoF.from_matrix(p.matrix())
    assert q.rx == 0.0
    assert np.allclose(q.matrix(), p.matrix(), atol=1e-9)


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        Pose6DoF(float("nan"))
    with pytest.raises(InvalidInputError):
        Intrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(InvalidInputError):
        Intrinsics(1.0, 1.0, 9.0, 0.0, 4, 4)
    with pytest.raises(InvalidInputError):
        Pose6DoF.from_json({"euler_xyz": [0, 0], "t": [0, 0, 0]})


def test_rotation_angle():
    assert rotation_angle_deg(Pose6DoF(rz=math.radians(30))) == pytest.approx(30.0)
