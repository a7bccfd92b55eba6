"""Quaternion and rotation helpers shared by every filter.

Conventions
-----------
Quaternions are Hamilton, scalar-first ``(w, x, y, z)`` and rotate vectors
from the body frame to the navigation frame: ``v_nav = R(q) @ v_body``.

Attitude errors are body-frame (local) rotation vectors::

    q_true = q_est ⊗ Exp(delta)        R_true = R_est @ Exp(delta)

Every filter in the package injects and extracts attitude errors with
:func:`error_inject` / :func:`error_extract`, so covariances of rotation
blocks always live in this tangent space.
"""

import math

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

_RENORM_TOL = 1e-6


def skew(v):
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v.tolist() if isinstance(v, np.ndarray) else v
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def _components(q):
    return q.tolist() if isinstance(q, np.ndarray) else [float(c) for c in q]


def quat_normalize(q):
    w, x, y, z = _components(q)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return np.array([w / n, x / n, y / n, z / n])


def _unit(q):
    """Components of ``q``, renormalized if it drifted off the unit sphere."""
    c = _components(q)
    w, x, y, z = c
    n2 = w * w + x * x + y * y + z * z
    if abs(n2 - 1.0) > _RENORM_TOL:
        n = math.sqrt(n2)
        if n == 0.0:
            raise ValueError("zero quaternion")
        return [w / n, x / n, y / n, z / n]
    return c


def quat_multiply(a, b):
    """Hamilton product ``a ⊗ b``; R(a ⊗ b) = R(a) R(b)."""
    aw, ax, ay, az = _unit(a)
    bw, bx, by, bz = _unit(b)
    w = aw * bw - ax * bx - ay * by - az * bz
    x = aw * bx + ax * bw + ay * bz - az * by
    y = aw * by - ax * bz + ay * bw + az * bx
    z = aw * bz + ax * by - ay * bx + az * bw
    n = math.sqrt(w * w + x * x + y * y + z * z)
    return np.array([w / n, x / n, y / n, z / n])


def quat_conjugate(q):
    w, x, y, z = _unit(q)
    return np.array([w, -x, -y, -z])


def rotation_matrix(q):
    """Body-to-navigation rotation matrix of a unit quaternion."""
    w, x, y, z = _unit(q)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def quat_from_matrix(R):
    """Inverse of :func:`rotation_matrix` (Shepperd's method), w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0.0 else -q


def quat_exp(phi):
    """Unit quaternion of the rotation vector ``phi`` (axis * angle)."""
    x, y, z = _components(phi)
    angle = math.sqrt(x * x + y * y + z * z)
    if angle < 1e-8:
        return quat_normalize([1.0, 0.5 * x, 0.5 * y, 0.5 * z])
    s = math.sin(0.5 * angle) / angle
    return np.array([math.cos(0.5 * angle), s * x, s * y, s * z])


def quat_log(q):
    """Rotation vector of ``q`` on the short arc, norm in [0, pi]."""
    w, x, y, z = _unit(q)
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    n = math.sqrt(x * x + y * y + z * z)
    c = 2.0 / w if n < 1e-12 else 2.0 * math.atan2(n, w) / n
    return np.array([c * x, c * y, c * z])


def so3_exp(phi):
    """Rotation matrix ``Exp(phi)`` via Rodrigues."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi @ phi)
    K = skew(phi)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + (math.sin(angle) / angle) * K
            + ((1.0 - math.cos(angle)) / angle ** 2) * K @ K)


def so3_log(R):
    return quat_log(quat_from_matrix(R))


def right_jacobian(phi):
    """Right Jacobian of SO(3): Exp(phi + d) ≈ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi @ phi)
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a2 = angle * angle
    return (np.eye(3) - ((1.0 - math.cos(angle)) / a2) * K
            + ((angle - math.sin(angle)) / (a2 * angle)) * K @ K)


def error_inject(q, delta):
    """Apply a body-frame attitude error: ``q ⊗ Exp(delta)``."""
    return quat_multiply(q, quat_exp(delta))


def error_extract(q_ref, q):
    """Body-frame error taking ``q_ref`` to ``q``; inverse of :func:`error_inject`."""
    return quat_log(quat_multiply(quat_conjugate(q_ref), q))


def quat_from_euler(roll, pitch, yaw):
    """ZYX (yaw-pitch-roll) Euler angles to quaternion."""
    cr, sr = math.cos(0.5 * roll), math.sin(0.5 * roll)
    cp, sp = math.cos(0.5 * pitch), math.sin(0.5 * pitch)
    cy, sy = math.cos(0.5 * yaw), math.sin(0.5 * yaw)
    return quat_normalize(np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ]))


def euler_from_quat(q):
    """Return (roll, pitch, yaw) in radians, ZYX convention."""
    R = rotation_matrix(q)
    pitch = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def yaw_from_quat(q):
    return euler_from_quat(q)[2]


def wrap_angle(a):
    """Wrap an angle (or array of angles) to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi
