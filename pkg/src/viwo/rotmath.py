"""Quaternion and rotation helpers.

Conventions
-----------
- Quaternions are ``np.ndarray`` of shape (4,), scalar first ``[w, x, y, z]``.
- Hamilton product. ``R(q)`` maps body vectors into the parent frame, so
  ``R(a ⊗ b) = R(a) R(b)``.
- Rotation perturbations are local (right) increments: ``q ⊗ exp(dtheta)``.
"""

import math

import numpy as np

SMALL_ANGLE = 1e-8

_I3 = np.eye(3)


def identity_quat():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_canonical(q):
    """Pick the representative with non-negative scalar part."""
    return -np.asarray(q, dtype=float) if q[0] < 0.0 else np.asarray(q, dtype=float)


def quat_mul(a, b):
    """Hamilton product ``a ⊗ b``, renormalized."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])
    return q / math.sqrt(q @ q)


def quat_left(q):
    """Matrix ``L(q)`` with ``q ⊗ p = L(q) p``."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_right(q):
    """Matrix ``Rm(q)`` with ``p ⊗ q = Rm(q) p``."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def quat_from_small_angle(theta):
    """Exact exponential map from a rotation vector (rad) to a unit quaternion."""
    theta = np.asarray(theta, dtype=float)
    angle = math.sqrt(theta @ theta)
    if angle < SMALL_ANGLE:
        # second-order series keeps the result unit to machine precision
        q = np.array([1.0 - angle * angle / 8.0, *(0.5 * theta)])
        return q / math.sqrt(q @ q)
    half = 0.5 * angle
    s = math.sin(half) / angle
    return np.array([math.cos(half), s * theta[0], s * theta[1], s * theta[2]])


def quat_log(q):
    """Rotation vector of ``q`` (inverse of :func:`quat_from_small_angle`)."""
    q = quat_canonical(q)
    v = q[1:]
    n = math.sqrt(v @ v)
    if n < SMALL_ANGLE:
        return 2.0 * v / q[0]
    return 2.0 * math.atan2(n, q[0]) / n * v


def quat_imag_doubled(q):
    """``2 * (x, y, z)`` of the sign-canonical quaternion.

    First-order equivalent of the rotation vector; used for rotation residuals.
    """
    q = quat_canonical(q)
    return 2.0 * q[1:]


def rot_from_quat(q):
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def quat_from_rot(R):
    """Unit quaternion (w >= 0) from a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_canonical(quat_normalize(q))


def skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(phi):
    """Rotation matrix of a rotation vector (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi @ phi)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return _I3 + K + 0.5 * K @ K
    return _I3 + math.sin(angle) / angle * K + (1.0 - math.cos(angle)) / angle**2 * K @ K


def so3_log(R):
    return quat_log(quat_from_rot(R))


def right_jacobian(phi):
    """Right Jacobian of SO(3): ``exp(phi + d) ~= exp(phi) exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi @ phi)
    K = skew(phi)
    if angle < 1e-5:
        return _I3 - 0.5 * K + K @ K / 6.0
    a2 = angle * angle
    return _I3 - (1.0 - math.cos(angle)) / a2 * K + (angle - math.sin(angle)) / (a2 * angle) * K @ K


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi @ phi)
    K = skew(phi)
    if angle < 1e-5:
        return _I3 + 0.5 * K + K @ K / 12.0
    coef = 1.0 / (angle * angle) - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return _I3 + 0.5 * K + coef * K @ K


def yaw_from_quat(q):
    """Heading of the ZYX (yaw-pitch-roll) decomposition."""
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def quat_from_yaw(yaw):
    return np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])


def quat_from_euler_zyx(yaw, pitch, roll):
    """Quaternion for ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    qz = quat_from_yaw(yaw)
    qy = np.array([math.cos(0.5 * pitch), 0.0, math.sin(0.5 * pitch), 0.0])
    qx = np.array([math.cos(0.5 * roll), math.sin(0.5 * roll), 0.0, 0.0])
    return quat_mul(quat_mul(qz, qy), qx)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


# Batched variants over a leading axis -------------------------------------

def batch_quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    q = np.stack((
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ), axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def batch_quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def batch_quat_exp(theta):
    angle = np.linalg.norm(theta, axis=-1)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    s = np.where(small, 0.5, np.sin(0.5 * safe) / safe)
    w = np.where(small, 1.0 - angle * angle / 8.0, np.cos(0.5 * safe))
    q = np.concatenate((w[..., None], s[..., None] * theta), axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def batch_quat_log(q):
    q = np.where(q[..., :1] < 0.0, -q, q)
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < SMALL_ANGLE
    safe = np.where(small, 1.0, n)
    scale = np.where(small, 2.0 / q[..., 0], 2.0 * np.arctan2(n, q[..., 0]) / safe)
    return scale[..., None] * v


def batch_rot_from_quat(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def batch_skew(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def batch_quat_left_vec(q):
    """Lower-right 3x3 block of ``L(q)``: ``w I + [v]x``."""
    return q[..., 0, None, None] * _I3 + batch_skew(q[..., 1:])


def batch_quat_right_vec(q):
    """Lower-right 3x3 block of ``Rm(q)``: ``w I - [v]x``."""
    return q[..., 0, None, None] * _I3 - batch_skew(q[..., 1:])


def batch_right_jacobian(phi):
    angle = np.linalg.norm(phi, axis=-1)
    K = batch_skew(phi)
    KK = K @ K
    small = angle < 1e-5
    safe = np.where(small, 1.0, angle)
    a2 = safe * safe
    c1 = np.where(small, 0.5, (1.0 - np.cos(safe)) / a2)
    c2 = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / (a2 * safe))
    return _I3 - c1[..., None, None] * K + c2[..., None, None] * KK


def batch_right_jacobian_inv(phi):
    angle = np.linalg.norm(phi, axis=-1)
    K = batch_skew(phi)
    KK = K @ K
    small = angle < 1e-5
    safe = np.where(small, 1.0, angle)
    coef = np.where(small, 1.0 / 12.0,
                    1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)))
    return _I3 + 0.5 * K + coef[..., None, None] * KK
