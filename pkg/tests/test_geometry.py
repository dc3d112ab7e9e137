"""Geometry kernel: oracle identities checked over many seeded cases."""

import math

import numpy as np
import pytest

from tcsfm.errors import NonPositiveDepth, ZeroVector
from tcsfm.geometry import (
    CameraPose,
    Intrinsics,
    SimilarityTransform,
    apply_sim3,
    compose_sim3,
    invert_sim3,
    matrix_to_quat,
    matrix_to_rotvec,
    project,
    project_many,
    project_to_so3,
    quat_to_matrix,
    random_rotation,
    rotation_error,
    rotvec_to_matrix,
    rotation_error as rot_err,
    skew,
    so3_right_jacobian,
    translation_direction_error,
)

K = Intrinsics(600.0, 620.0, 320.0, 240.0)


def test_rotation_error_identity_and_half_turn(rng):
    for _ in range(200):
        R = random_rotation(rng)
        assert rotation_error(R, R) < 1e-9
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        half = R @ rotvec_to_matrix(math.pi * axis)
        assert abs(rotation_error(R, half) - math.pi) < 1e-9


def test_rotation_error_symmetric_and_matches_rotvec_norm(rng):
    for _ in range(100):
        R1 = random_rotation(rng)
        R2 = random_rotation(rng)
        e = rotation_error(R1, R2)
        assert abs(e - rotation_error(R2, R1)) < 1e-12
        assert abs(e - np.linalg.norm(matrix_to_rotvec(R1.T @ R2))) < 1e-8


def test_translation_direction_error_scale_invariant(rng):
    for _ in range(200):
        t1 = rng.normal(size=3)
        t2 = rng.normal(size=3)
        e = translation_direction_error(t1, t2)
        for a, b in ((3.7, 0.04), (1e3, 1e-3), (0.5, 12.0)):
            assert abs(translation_direction_error(a * t1, b * t2) - e) < 1e-9
        assert translation_direction_error(t1, 5.0 * t1) < 1e-9


def test_translation_direction_error_zero_vector_raises():
    with pytest.raises(ZeroVector):
        translation_direction_error(np.zeros(3), np.ones(3))


def test_camera_center_identity(rng):
    for _ in range(200):
        R = random_rotation(rng)
        t = rng.normal(size=3)
        pose = CameraPose(R, t)
        assert np.allclose(pose.c, -R.T @ t, atol=1e-12)
        again = CameraPose.from_center(R, pose.c)
        assert np.allclose(again.t, t, atol=1e-9)
        assert np.allclose(again.c, pose.c, atol=1e-9)


def test_camera_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        CameraPose(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(-np.eye(3), np.zeros(3))  # det = -1


def test_sim3_inverse_round_trip(rng):
    for _ in range(200):
        T = SimilarityTransform(
            random_rotation(rng), rng.normal(size=3), float(rng.uniform(0.2, 5.0))
        )
        Tinv = invert_sim3(T)
        p = rng.normal(size=(10, 3))
        assert np.allclose(apply_sim3(Tinv, apply_sim3(T, p)), p, atol=1e-9)
        I = compose_sim3(Tinv, T)
        assert rotation_error(I.R, np.eye(3)) < 1e-9
        assert np.linalg.norm(I.t) < 1e-9
        assert abs(I.s - 1.0) < 1e-9


def test_sim3_composition_matches_sequential_application(rng):
    T1 = SimilarityTransform(random_rotation(rng), rng.normal(size=3), 1.7)
    T2 = SimilarityTransform(random_rotation(rng), rng.normal(size=3), 0.4)
    p = rng.normal(size=(20, 3))
    assert np.allclose(
        apply_sim3(compose_sim3(T2, T1), p), apply_sim3(T2, apply_sim3(T1, p)), atol=1e-12
    )


def test_rotvec_matrix_round_trip(rng):
    for _ in range(100):
        v = rng.normal(size=3)
        R = rotvec_to_matrix(v)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        back = matrix_to_rotvec(R)
        # rotvec norms above pi wrap; compare as rotations
        assert rot_err(rotvec_to_matrix(back), R) < 1e-9


def test_quaternion_round_trip(rng):
    for _ in range(100):
        R = random_rotation(rng)
        q = matrix_to_quat(R)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12
        assert q[0] >= 0.0
        assert rot_err(quat_to_matrix(q), R) < 1e-9


def test_project_matches_manual_pinhole(rng):
    pose = CameraPose(random_rotation(rng), np.array([0.1, -0.2, 6.0]))
    p = rng.normal(size=3)
    pc = pose.R @ p + pose.t
    expected = np.array([K.fx * pc[0] / pc[2] + K.cx, K.fy * pc[1] / pc[2] + K.cy])
    assert np.allclose(project(pose, K, p), expected, atol=1e-12)


def test_project_behind_camera_raises():
    pose = CameraPose.identity()
    with pytest.raises(NonPositiveDepth):
        project(pose, K, np.array([0.0, 0.0, -1.0]))


def test_project_many_matches_project(rng):
    pose = CameraPose(random_rotation(rng), np.array([0.0, 0.0, 8.0]))
    pts = rng.normal(size=(50, 3))
    px, z = project_many(pose, K, pts)
    for i in range(50):
        if z[i] > 1e-6:
            assert np.allclose(px[i], project(pose, K, pts[i]), atol=1e-9)


def test_skew_matches_cross_product(rng):
    for _ in range(20):
        a = rng.normal(size=3)
        b = rng.normal(size=3)
        assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)


def test_so3_right_jacobian_matches_finite_differences(rng):
    # exp(theta + J_r(theta) dtheta) ~ exp(theta) exp(dtheta)
    for _ in range(50):
        theta = rng.normal(size=3)
        Jr = so3_right_jacobian(theta)
        num = np.empty((3, 3))
        h = 1e-7
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            Rp = rotvec_to_matrix(theta) @ rotvec_to_matrix(Jr @ d)
            num[:, k] = (matrix_to_rotvec(Rp) - theta) / h
        assert np.allclose(num, np.eye(3), atol=1e-5)


def test_so3_right_jacobian_small_angle_limit():
    assert np.allclose(so3_right_jacobian(np.zeros(3)), np.eye(3), atol=1e-15)
    tiny = so3_right_jacobian(np.array([1e-10, 0.0, 0.0]))
    assert np.allclose(tiny, np.eye(3), atol=1e-9)


def test_project_to_so3_recovers_noisy_rotation(rng):
    R = random_rotation(rng)
    M = R + 1e-6 * rng.normal(size=(3, 3))
    Rp = project_to_so3(M)
    assert np.allclose(Rp.T @ Rp, np.eye(3), atol=1e-12)
    assert rot_err(R, Rp) < 1e-5
    # reflection input still yields a proper rotation
    Rr = project_to_so3(np.diag([1.0, 1.0, -1.0]))
    assert np.linalg.det(Rr) > 0
