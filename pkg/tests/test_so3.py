import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pinwm.so3 import (
    axis_angle_to_quat,
    integrate_pose,
    integrate_pose_vjp,
    matrix_to_quat,
    pose_to_transform,
    quat_angle,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    quat_to_matrix_vjp,
    transform_inverse,
    transform_to_pose,
)

finite = st.floats(-2.0, 2.0, allow_nan=False)
vec3 = arrays(float, 3, elements=finite)
quat = arrays(float, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 0.1).map(quat_normalize)


def test_quat_mul_identity_and_units():
    q = np.array([0.3, -0.1, 0.7, 0.2])
    np.testing.assert_array_equal(quat_mul([1, 0, 0, 0], q), q)
    np.testing.assert_array_equal(quat_mul([0, 1, 0, 0], [0, 1, 0, 0]), [-1, 0, 0, 0])
    np.testing.assert_array_equal(quat_mul([0, 1, 0, 0], [0, 0, 1, 0]), [0, 0, 0, 1])


def test_integrate_pure_translation():
    p, q = integrate_pose([0, 0, 0], [1, 0, 0, 0], [1, 0, 0], [0, 0, 0], 0.1)
    np.testing.assert_allclose(p, [0.1, 0, 0])
    np.testing.assert_allclose(q, [1, 0, 0, 0])


def test_integrate_small_spin_about_z():
    _, q = integrate_pose([0, 0, 0], [1, 0, 0, 0], [0, 0, 0], [0, 0, 1], 0.01)
    np.testing.assert_allclose(q, [0.9999875, 0, 0, 0.0049999], atol=1e-7)


@given(vec3, quat, st.floats(1e-4, 1.0))
def test_zero_twist_leaves_pose(p, q, H):
    p2, q2 = integrate_pose(p, q, np.zeros(3), np.zeros(3), H)
    np.testing.assert_array_equal(p2, p)
    np.testing.assert_allclose(q2, q, atol=1e-15)


def test_integrate_rejects_non_finite():
    with pytest.raises(ValueError):
        integrate_pose([0, 0, 0], [1, 0, 0, 0], [np.nan, 0, 0], [0, 0, 0], 0.1)


def test_normalize_guard():
    with pytest.raises(ValueError):
        quat_normalize([0, 0, 0, 1e-13])


def test_transform_examples():
    np.testing.assert_array_equal(pose_to_transform([0, 0, 0], [1, 0, 0, 0]), np.eye(4))
    s = math.sqrt(0.5)
    T = pose_to_transform([0, 0, 0], [s, 0, 0, s])
    np.testing.assert_allclose(T[:3, :3] @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    with pytest.raises(ValueError):
        pose_to_transform([0, 0, 0], [1.0, 0, 0, 1e-2])


@given(quat, quat)
def test_rotation_matrix_is_homomorphism(a, b):
    np.testing.assert_allclose(quat_to_matrix(quat_mul(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


@given(quat)
def test_matrix_roundtrip(q):
    R = quat_to_matrix(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    back = matrix_to_quat(R)
    assert quat_angle(back, q) < 1e-7


@given(vec3, quat)
def test_transform_inverse(p, q):
    T = pose_to_transform(p, q)
    np.testing.assert_allclose(T @ transform_inverse(T), np.eye(4), atol=1e-12)
    p2, q2 = transform_to_pose(T)
    np.testing.assert_allclose(p2, p)
    assert quat_angle(q2, q) < 1e-7


@given(quat, quat)
def test_quat_angle_symmetric_and_sign_invariant(a, b):
    ang = quat_angle(a, b)
    assert 0 <= ang <= math.pi + 1e-12
    assert ang == pytest.approx(quat_angle(b, a), abs=1e-12)
    assert ang == pytest.approx(quat_angle(a, -b), abs=1e-12)


def test_quat_angle_exact_zero_and_known():
    q = quat_normalize([0.2, 0.4, -0.1, 0.9])
    assert quat_angle(q, q) == 0.0
    assert quat_angle([1, 0, 0, 0], axis_angle_to_quat([0, 0, 0.3])) == pytest.approx(0.3)


@settings(max_examples=30)
@given(quat, vec3, st.floats(1e-3, 0.1))
def test_integrate_vjp_matches_fd(q, w, H):
    rng = np.random.default_rng(0)
    c = rng.standard_normal(4)
    f = lambda qq, ww: c @ integrate_pose(np.zeros(3), qq, np.zeros(3), ww, H)[1]
    q_bar, w_bar = integrate_pose_vjp(q, w, H, c)
    eps = 1e-6
    for i in range(4):
        d = np.zeros(4)
        d[i] = eps
        assert q_bar[i] == pytest.approx((f(q + d, w) - f(q - d, w)) / (2 * eps), abs=1e-7)
    for i in range(3):
        d = np.zeros(3)
        d[i] = eps
        assert w_bar[i] == pytest.approx((f(q, w + d) - f(q, w - d)) / (2 * eps), abs=1e-7)


def test_matrix_vjp_matches_fd(rng):
    q = quat_normalize(rng.standard_normal(4))
    C = rng.standard_normal((3, 3))
    g = quat_to_matrix_vjp(q, C)
    eps = 1e-6
    for i in range(4):
        d = np.zeros(4)
        d[i] = eps
        fd = (np.sum(C * quat_to_matrix(q + d)) - np.sum(C * quat_to_matrix(q - d))) / (2 * eps)
        assert g[i] == pytest.approx(fd, abs=1e-8)


def test_conjugate_inverts():
    q = quat_normalize([0.5, 0.1, 0.2, -0.3])
    np.testing.assert_allclose(quat_mul(q, quat_conj(q)), [1, 0, 0, 0], atol=1e-15)
