"""Quaternion and rigid-transform algebra plus the semi-implicit pose integrator.

Quaternions are scalar-first ``(w, x, y, z)`` numpy arrays combined with the
Hamilton product.  Functions accept leading batch dimensions where it is cheap
to do so.  The ``*_vjp`` helpers return vector-Jacobian products used by the
hand-written backward pass of the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class Twist:
    v: np.ndarray
    w: np.ndarray


def identity_quat() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` (not normalized)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    return np.asarray(q, dtype=float) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < NORM_EPS):
        raise ValueError("cannot normalize a quaternion with norm below 1e-12")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix ``(..., 3, 3)`` of a unit quaternion."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _dR_dq(q: np.ndarray) -> np.ndarray:
    """``(4, 3, 3)`` partial derivatives of :func:`quat_to_matrix`."""
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
        ]
    )


def quat_to_matrix_vjp(q: np.ndarray, R_bar: np.ndarray) -> np.ndarray:
    """Gradient with respect to ``q`` given the gradient on the matrix."""
    return np.einsum("kij,ij->k", _dR_dq(np.asarray(q, dtype=float)), R_bar)


def matrix_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix` for one rotation matrix (returns w >= 0)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def axis_angle_to_quat(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        return quat_normalize(np.concatenate(([1.0], 0.5 * rotvec)))
    return np.concatenate(([np.cos(angle / 2)], np.sin(angle / 2) * rotvec / angle))


def quat_angle(a, b) -> np.ndarray:
    """Geodesic angle ``2·arccos(|a·b|)`` between unit quaternions, in [0, π].

    Evaluated as ``2·atan2(|vec(a* ⊗ b)|, |scalar(a* ⊗ b)|)``, which equals the
    arccos form but is exactly zero for identical inputs and accurate for
    small angles.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    av, bv = a[..., 1:], b[..., 1:]
    # vector part grouped so that identical inputs cancel exactly
    vec = (a[..., :1] * bv - b[..., :1] * av) - np.cross(av, bv)
    scalar = a[..., 0] * b[..., 0] + np.sum(av * bv, axis=-1)
    return 2.0 * np.arctan2(np.linalg.norm(vec, axis=-1), np.abs(scalar))


def _left_pure(w: np.ndarray) -> np.ndarray:
    """Matrix ``L`` with ``[0, w] ⊗ q = L q``."""
    wx, wy, wz = w
    return np.array([[0, -wx, -wy, -wz], [wx, 0, -wz, wy], [wy, wz, 0, -wx], [wz, -wy, wx, 0]])


def _right(q: np.ndarray) -> np.ndarray:
    """Matrix ``Q`` with ``a ⊗ q = Q a``."""
    qw, qx, qy, qz = q
    return np.array([[qw, -qx, -qy, -qz], [qx, qw, qz, -qy], [qy, -qz, qw, qx], [qz, qy, -qx, qw]])


def integrate_pose(p, q, v_next, w_next, H: float) -> tuple[np.ndarray, np.ndarray]:
    """Semi-implicit Euler: ``p' = p + H v``, ``q' = normalize(q + H/2 [0, w] ⊗ q)``."""
    if not H > 0:
        raise ValueError(f"step must be positive, got {H}")
    v_next = np.asarray(v_next, dtype=float)
    w_next = np.asarray(w_next, dtype=float)
    if not (np.isfinite(v_next).all() and np.isfinite(w_next).all()):
        raise ValueError("non-finite twist passed to integrate_pose")
    q = np.asarray(q, dtype=float)
    q_raw = q + 0.5 * H * (_left_pure(w_next) @ q)
    return np.asarray(p, dtype=float) + H * v_next, quat_normalize(q_raw)


def integrate_pose_vjp(q, w_next, H, q_new_bar):
    """Backward of the quaternion update: returns ``(q_bar, w_bar)``."""
    q = np.asarray(q, dtype=float)
    q_raw = q + 0.5 * H * (_left_pure(w_next) @ q)
    norm = np.linalg.norm(q_raw)
    q_new = q_raw / norm
    raw_bar = (q_new_bar - q_new * np.dot(q_new, q_new_bar)) / norm
    q_bar = raw_bar + 0.5 * H * (_left_pure(w_next).T @ raw_bar)
    w_bar = 0.5 * H * (_right(q).T @ raw_bar)[1:]
    return q_bar, w_bar


def pose_to_transform(p, q, atol: float = 1e-6) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > atol:
        raise ValueError(f"quaternion is not unit length (norm {n:.6g})")
    T = np.eye(4)
    T[:3, :3] = quat_to_matrix(q)
    T[:3, 3] = p
    return T


def transform_inverse(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    out = np.eye(4)
    out[:3, :3] = T[:3, :3].T
    out[:3, 3] = -T[:3, :3].T @ T[:3, 3]
    return out


def transform_to_pose(T) -> tuple[np.ndarray, np.ndarray]:
    T = np.asarray(T, dtype=float)
    return T[:3, 3].copy(), matrix_to_quat(T[:3, :3])


def cross_vjp(a, b, c_bar):
    """Gradients of ``c = a × b``: ``(a_bar, b_bar) = (b × c_bar, c_bar × a)``."""
    return np.cross(b, c_bar), np.cross(c_bar, a)
