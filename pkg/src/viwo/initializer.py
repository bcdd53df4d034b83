"""Wheel/IMU bootstrap: gyro bias from wheel-heading consistency, then
per-keyframe velocities and gravity from a linear least-squares system."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InitializationError, InsufficientExcitationError
from .imu_preint import GRAVITY, ImuPreintegration, NoiseParams
from .rotmath import (
    quat_conj,
    quat_from_euler_zyx,
    quat_from_rot,
    quat_from_small_angle,
    quat_from_yaw,
    quat_mul,
    rot_from_quat,
)
from .state import Extrinsics, KeyframeState
from .wheel_odom import WheelPreintegration

K_MIN = 5
MIN_INTERVAL = 0.05
MAX_CONDITION = 1e8
MAX_BIAS = 0.2
MAX_ROT_RMS = 0.01
G_RANGE = (8.3, 11.3)


@dataclass(eq=False)
class InitInterval:
    """One keyframe interval: IMU samples plus pre-fused wheel measurements."""

    t0: float
    imu_samples: list
    wheel_meas: list

    @property
    def dt(self):
        return self.wheel_meas[-1].t1 - self.t0 if self.wheel_meas else 0.0


@dataclass(eq=False)
class InitResult:
    states: list
    bg: np.ndarray
    g_B0: np.ndarray
    imu: list
    wheel: list


def wheel_heading_quat(meas):
    """Yaw-only rotation accumulated from wheel heading increments."""
    q = np.array([1.0, 0.0, 0.0, 0.0])
    for m in meas:
        q = quat_mul(q, quat_from_yaw(m.delta_theta))
    return q


def _wheel_rotation_in_body(meas, extr):
    q_OB = quat_from_rot(extr.R_odom_in_body)
    return quat_mul(quat_mul(q_OB, wheel_heading_quat(meas)), quat_conj(q_OB))


def _rotation_errors(pres, targets, bg):
    out = []
    for pre, qw in zip(pres, targets):
        dbg = bg - pre.bg_ref
        q = quat_mul(pre.q, quat_from_small_angle(pre.J_q_bg @ dbg))
        e = quat_mul(quat_conj(q), qw)
        out.append(2.0 * (e[1:] if e[0] >= 0 else -e[1:]))
    return np.array(out)


def estimate_gyro_bias(intervals, extr, noise=None, iterations=4):
    """Gyro bias making IMU relative rotations agree with the wheel heading.

    Solves the normal equations with a Cholesky factorization and re-integrates
    around the new estimate between passes.
    """
    if len(intervals) < 3:
        raise InitializationError("gyro bias needs at least 3 intervals")
    noise = noise or NoiseParams()
    targets = [_wheel_rotation_in_body(iv.wheel_meas, extr) for iv in intervals]
    bg = np.zeros(3)
    for _ in range(iterations):
        pres = [ImuPreintegration.from_samples(iv.imu_samples, iv.t0, None, bg, noise) for iv in intervals]
        A = np.zeros((3, 3))
        rhs = np.zeros(3)
        for pre, qw in zip(pres, targets):
            Jq = pre.J_q_bg
            e = quat_mul(quat_conj(pre.q), qw)
            A += Jq.T @ Jq
            rhs += Jq.T @ (2.0 * (e[1:] if e[0] >= 0 else -e[1:]))
        if np.linalg.cond(A) > MAX_CONDITION:
            raise InsufficientExcitationError("gyro-bias normal matrix is ill-conditioned")
        step = cho_solve(cho_factor(A), rhs)
        bg = bg + step
        if np.linalg.norm(step) < 1e-14:
            break
    if np.linalg.norm(bg) > MAX_BIAS:
        raise InsufficientExcitationError(f"gyro and wheel heading disagree (|bg| = {np.linalg.norm(bg):.3f})")
    err = _rotation_errors(pres, targets, bg)
    rms = math.sqrt(np.mean(np.sum(err ** 2, axis=1)))
    if rms > MAX_ROT_RMS:
        raise InsufficientExcitationError(f"wheel heading residual {rms:.4f} rad after bias fit")
    return bg


def init_velocity_gravity(imu_pres, wheel_pres, extr, estimate_scale=False):
    """Velocities (each in its own body frame) and gravity in the first body
    frame from bias-corrected preintegrations.

    Returns ``(velocities, g_B0, scale)``.
    """
    K = len(imu_pres)
    if K + 1 < 4:
        raise InitializationError("velocity/gravity init needs at least 4 keyframes")
    R_OB = extr.R_odom_in_body
    p_OB = extr.p_odom_in_body
    nv = 3 * (K + 1)
    ncol = nv + 3 + 1
    H = np.zeros((6 * K, ncol))
    z = np.zeros(6 * K)
    R0k = np.eye(3)
    for k, (ip, wp) in enumerate(zip(imu_pres, wheel_pres)):
        dt = ip.dt_sum
        Rkk1 = rot_from_quat(ip.q)
        d = R_OB @ wp.p
        ra, rb = 6 * k, 6 * k + 3
        # alpha row
        H[ra:ra + 3, 3 * k:3 * k + 3] = -dt * np.eye(3)
        H[ra:ra + 3, nv:nv + 3] = 0.5 * dt * dt * R0k.T
        H[ra:ra + 3, nv + 3] = d
        z[ra:ra + 3] = ip.alpha - p_OB + Rkk1 @ p_OB
        # beta row
        H[rb:rb + 3, 3 * k:3 * k + 3] = -np.eye(3)
        H[rb:rb + 3, 3 * (k + 1):3 * (k + 2)] = Rkk1
        H[rb:rb + 3, nv:nv + 3] = dt * R0k.T
        z[rb:rb + 3] = ip.beta
        R0k = R0k @ Rkk1
    if not estimate_scale:
        z = z - H[:, nv + 3]
        H = H[:, :nv + 3]
    c, low = cho_factor(H.T @ H)
    x = cho_solve((c, low), H.T @ z)
    g = x[nv:nv + 3]
    gn = np.linalg.norm(g)
    if not (G_RANGE[0] <= gn <= G_RANGE[1]):
        raise InitializationError(f"gravity magnitude {gn:.3f} outside [{G_RANGE[0]}, {G_RANGE[1]}]")
    vel = [x[3 * k:3 * k + 3] for k in range(K + 1)]
    scale = x[nv + 3] if estimate_scale else 1.0
    return vel, g * (np.linalg.norm(GRAVITY) / gn), scale


def gravity_aligned_rotation(g_B0):
    """World-from-B0 rotation with zero yaw that maps ``g_B0`` onto +z."""
    gh = g_B0 / np.linalg.norm(g_B0)
    pitch = math.asin(float(np.clip(-gh[0], -1.0, 1.0)))
    roll = math.atan2(gh[1], gh[2])
    return quat_from_euler_zyx(0.0, pitch, roll)


def bootstrap(intervals, extr=None, noise=None):
    """Initial keyframe states in the gravity-aligned world frame.

    ``intervals`` are the consecutive spans between ``len(intervals) + 1``
    frames; at least ``K_MIN`` are required.
    """
    extr = extr or Extrinsics()
    noise = noise or NoiseParams()
    if len(intervals) < K_MIN:
        raise InitializationError(f"need {K_MIN} intervals, have {len(intervals)}")
    for iv in intervals:
        if iv.dt <= MIN_INTERVAL or not iv.imu_samples:
            raise InitializationError("initialization interval too short")
    bg = estimate_gyro_bias(intervals, extr, noise)
    imu = [ImuPreintegration.from_samples(iv.imu_samples, iv.t0, None, bg, noise) for iv in intervals]
    wheel = [WheelPreintegration.from_meas(iv.wheel_meas, extr, bg, noise, iv.t0) for iv in intervals]
    vel, g_B0, _ = init_velocity_gravity(imu, wheel, extr)

    q_WB0 = gravity_aligned_rotation(g_B0)
    R_OB, p_OB = extr.R_odom_in_body, extr.p_odom_in_body
    q = [np.array([1.0, 0.0, 0.0, 0.0])]
    for ip in imu:
        q.append(quat_mul(q[-1], ip.q))
    p = [np.zeros(3)]
    for k, wp in enumerate(wheel):
        Rk, Rk1 = rot_from_quat(q[k]), rot_from_quat(q[k + 1])
        p.append(p[-1] + Rk @ (R_OB @ wp.p + p_OB) - Rk1 @ p_OB)
    R_WB0 = rot_from_quat(q_WB0)
    times = [iv.t0 for iv in intervals] + [intervals[-1].t0 + imu[-1].dt_sum]
    states = []
    for k in range(len(q)):
        qw = quat_mul(q_WB0, q[k])
        states.append(KeyframeState(
            R_WB0 @ p[k], rot_from_quat(qw) @ vel[k], qw, np.zeros(3), bg.copy(), times[k]))
    return InitResult(states, bg, g_B0, imu, wheel)
