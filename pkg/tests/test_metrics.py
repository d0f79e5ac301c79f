import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfpose.lie import Sim3, exp_so3, random_rotation
from sdfpose.metrics import (
    PoseErrors,
    bbox_iou_3d,
    compose_pose,
    decompose_pose,
    fitting_rate,
    pose_accurate,
    pose_errors,
    quaternion_to_rotation,
    rotation_to_quaternion,
)


def test_decompose_identity_and_uniform_scale():
    q, p, s = decompose_pose(Sim3.identity())
    np.testing.assert_array_equal(q, [1, 0, 0, 0])
    np.testing.assert_array_equal(p, [0, 0, 0])
    np.testing.assert_array_equal(s, [1, 1, 1])
    _, _, s = decompose_pose(Sim3.from_parts(2.0, exp_so3([0.3, 0.1, -0.2])))
    np.testing.assert_allclose(s, [2, 2, 2], rtol=1e-14)


def test_compose_decompose_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        R = random_rotation(rng)
        s, t = rng.uniform(0.1, 5.0, size=3), rng.normal(size=3)
        M = np.eye(4)
        M[:3, :3] = R * s
        M[:3, 3] = t
        q, p, s2 = decompose_pose(M)
        assert q[0] >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12
        np.testing.assert_allclose(compose_pose(q, p, s2), M, atol=1e-9)


def test_quaternion_near_half_turn_uses_stable_branch():
    for axis in np.eye(3):
        R = exp_so3(np.pi * axis)
        q = rotation_to_quaternion(R)
        np.testing.assert_allclose(quaternion_to_rotation(q), R, atol=1e-12)
        assert abs(q[0]) < 1e-12


def test_pose_error_examples():
    T = Sim3.from_parts(1.3, exp_so3([0.2, 0.5, -0.1]), [1, 2, 3])
    assert pose_errors(T, T).as_tuple() == pytest.approx((0, 0, 0), abs=1e-6)
    rot = Sim3.from_parts(1.0, exp_so3([0, 0, np.radians(20)]))
    assert pose_errors(rot @ T, T).rotation_deg == pytest.approx(20.0, abs=1e-6)
    big = Sim3.from_parts(1.3 * 1.2, T.rotation, T.translation)
    assert pose_errors(big, T).scale_pct == pytest.approx(20.0, abs=1e-9)
    moved = Sim3.from_parts(1.3, T.rotation, T.translation + [0.3, 0.4, 0])
    assert pose_errors(moved, T).translation == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pose_errors_symmetric_and_sign_invariant(seed):
    rng = np.random.default_rng(seed)
    A = Sim3.from_parts(1.0, random_rotation(rng))
    B = Sim3.from_parts(1.0, random_rotation(rng))
    ab, ba = pose_errors(A, B).rotation_deg, pose_errors(B, A).rotation_deg
    assert ab == pytest.approx(ba, abs=1e-6)
    assert 0.0 <= ab <= 180.0
    qa, qb = rotation_to_quaternion(A.rotation), rotation_to_quaternion(B.rotation)
    assert quaternion_to_rotation(-qa) == pytest.approx(quaternion_to_rotation(qa))
    assert np.degrees(2 * np.arccos(min(1.0, abs(qa @ qb)))) == pytest.approx(ab, abs=1e-6)


def test_pose_accurate_inclusive_thresholds():
    assert pose_accurate((19, 0.19, 19)) is True
    assert pose_accurate(PoseErrors(0.0, 0.21, 0.0)) is False
    assert pose_accurate(PoseErrors(20.0, 0.2, 20.0)) is True
    assert pose_accurate(PoseErrors(20.0001, 0.0, 0.0)) is False


def test_fitting_rate_examples(rng):
    S = rng.normal(size=(500, 3))
    assert fitting_rate(S, S, 0.2) == 1.0
    assert fitting_rate(S + [0.4, 0, 0], S[:1], 0.2) == 0.0
    with pytest.raises(ValueError):
        fitting_rate(np.zeros((0, 3)), S)


def test_fitting_rate_constructed_fraction():
    rng = np.random.default_rng(3)
    gt = rng.uniform(-1, 1, size=(400, 3))
    for k in (0, 37, 150, 400):
        inliers = gt[rng.choice(400, size=k, replace=False)] + rng.normal(scale=0.01, size=(k, 3))
        outliers = rng.uniform(-1, 1, size=(400 - k, 3)) + [10.0, 0, 0]
        est = np.concatenate([inliers, outliers])
        assert fitting_rate(est, gt, 0.2) == k / 400


def test_fitting_rate_monotone_in_lambda(rng):
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(100, 3))
    rates = [fitting_rate(a, b, lam) for lam in (0.05, 0.1, 0.2, 0.5, 1.0)]
    assert rates == sorted(rates)


def test_bbox_iou_examples(rng):
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    assert bbox_iou_3d(cube, cube) == 1.0
    assert bbox_iou_3d(cube, cube + [3, 0, 0]) == 0.0
    assert bbox_iou_3d(cube, cube + [0.5, 0, 0]) == pytest.approx(1 / 3, abs=1e-15)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(60, 3)) + 0.3
    assert bbox_iou_3d(a, b) == bbox_iou_3d(b, a)
    with pytest.raises(ValueError):
        bbox_iou_3d(np.zeros((0, 3)), cube)
