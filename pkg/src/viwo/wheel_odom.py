"""Planar dead reckoning and gyro-aided wheel-odometer preintegration.

Wheel preintegration error-state order is ``[dp, dtheta, dbg]``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InternalConsistencyError, RejectedSampleError, RepropagationRequired
from .imu_preint import REPROPAGATE_THRESHOLD, NoiseParams
from .rotmath import (
    batch_rot_from_quat,
    batch_skew,
    quat_from_small_angle,
    quat_mul,
    right_jacobian,
    rot_from_quat,
    skew,
    wrap_angle,
)
from .state import Extrinsics

D_MIN = 1e-4

P, TH, BG = slice(0, 3), slice(3, 6), slice(6, 9)


@dataclass(frozen=True)
class Odom2DState:
    px: float = 0.0
    py: float = 0.0
    theta: float = 0.0


def dead_reckon_step(s, w, dt):
    """Move along the current heading, then turn."""
    vals = (w.vx, w.vy, w.omega, dt)
    if not all(math.isfinite(v) for v in vals):
        raise RejectedSampleError("non-finite wheel sample")
    if not dt > 0.0:
        raise RejectedSampleError(f"invalid wheel step dt={dt!r}")
    c, sn = math.cos(s.theta), math.sin(s.theta)
    return Odom2DState(
        s.px + (c * w.vx - sn * w.vy) * dt,
        s.py + (sn * w.vx + c * w.vy) * dt,
        wrap_angle(s.theta + w.omega * dt),
    )


def dead_reckon(samples, state=None):
    """Dead-reckon a wheel stream; returns the state after every sample.

    The first sample only sets the clock.
    """
    s = state or Odom2DState()
    out = [s]
    for prev, cur in zip(samples[:-1], samples[1:]):
        s = dead_reckon_step(s, cur, cur.t - prev.t)
        out.append(s)
    return out


class WheelPreintegration:
    def __init__(self, bg_ref=None, noise=None, extr=None, t0=0.0):
        self.p = np.zeros(3)
        self.q = np.array([1.0, 0.0, 0.0, 0.0])
        self.bg_ref = np.zeros(3) if bg_ref is None else np.array(bg_ref, dtype=float)
        self.noise = noise or NoiseParams()
        self.extr = extr or Extrinsics()
        self.cov = np.zeros((9, 9))
        self.jac = np.eye(9)
        self.dt_sum = 0.0
        self.t0 = float(t0)
        self.meas = []
        self._sqrt_info = None

    @classmethod
    def from_meas(cls, meas, extr, bg_ref=None, noise=None, t0=None):
        if t0 is None:
            t0 = meas[0].t0 if meas else 0.0
        pre = cls(bg_ref, noise, extr, t0)
        for m in meas:
            pre._step(m)
        return pre

    @property
    def Jp_bg(self):
        return self.jac[P, BG]

    @property
    def Jq_bg(self):
        return self.jac[TH, BG]

    def copy(self):
        out = WheelPreintegration(self.bg_ref, self.noise, self.extr, self.t0)
        out.p, out.q = self.p.copy(), self.q.copy()
        out.cov, out.jac = self.cov.copy(), self.jac.copy()
        out.dt_sum = self.dt_sum
        out.meas = list(self.meas)
        return out

    def _step(self, m):
        dt = m.t1 - m.t0
        if not dt > 0.0:
            raise RejectedSampleError(f"invalid wheel interval [{m.t0}, {m.t1}]")
        n = self.noise
        R_BO = self.extr.R_odom_in_body.T
        R = rot_from_quat(self.q)
        dp = np.asarray(m.delta_p, dtype=float)
        w = R_BO @ (np.asarray(m.avg_gyro, dtype=float) - self.bg_ref)
        dq = quat_from_small_angle(w * dt)

        self.p = self.p + R @ dp
        self.q = quat_mul(self.q, dq)

        Fd = np.eye(9)
        Fd[P, TH] = -R @ skew(dp)
        Fd[TH, TH] -= skew(w) * dt
        Fd[TH, BG] = -R_BO * dt
        d = max(float(np.linalg.norm(dp)), D_MIN)
        sw = np.asarray(n.sigma_wheel, dtype=float)
        Qd = np.zeros((9, 9))
        Qd[P, P] = R @ np.diag(sw ** 2 * d * d / dt) @ R.T
        Qd[TH, TH] = np.eye(3) * n.sigma_g ** 2 * dt
        Qd[BG, BG] = np.eye(3) * n.sigma_bg ** 2 * dt
        cov = Fd @ self.cov @ Fd.T + Qd
        self.cov = 0.5 * (cov + cov.T)

        Phi = np.eye(9)
        Phi[P, TH] = -R @ skew(dp)
        Phi[TH, TH] = rot_from_quat(dq).T
        Phi[TH, BG] = -right_jacobian(w * dt) @ R_BO * dt
        self.jac = Phi @ self.jac

        self.dt_sum += dt
        self.meas.append(m)
        self._sqrt_info = None

    def repropagate(self, bg_ref):
        return WheelPreintegration.from_meas(self.meas, self.extr, bg_ref, self.noise, self.t0)

    def extended(self, other):
        out = self.copy()
        for m in other.meas:
            out._step(m)
        return out

    def sqrt_info(self):
        if self._sqrt_info is None:
            L = np.linalg.cholesky(wheel_residual_covariance(self) + 1e-18 * np.eye(3))
            self._sqrt_info = np.linalg.inv(L)
        return self._sqrt_info


def wheel_preint_propagate(pre, m, extr=None):
    out = pre.copy()
    if extr is not None:
        out.extr = extr
    out._step(m)
    return out


def _corrected_p(pre, bg):
    dbg = np.asarray(bg, dtype=float) - pre.bg_ref
    if np.linalg.norm(dbg) >= REPROPAGATE_THRESHOLD:
        raise RepropagationRequired("gyro bias shift exceeds first-order validity")
    return pre.p + pre.Jp_bg @ dbg


def wheel_residual(pre, x_k, x_k1, extr=None):
    e = extr or pre.extr
    R_OBt = e.R_odom_in_body.T
    p_OB = e.p_odom_in_body
    Rkt = rot_from_quat(x_k.q).T
    moved = Rkt @ (x_k1.p - x_k.p) + Rkt @ rot_from_quat(x_k1.q) @ p_OB
    return R_OBt @ moved - R_OBt @ p_OB - _corrected_p(pre, x_k.bg)


def wheel_residual_jacobian(pre, x_k, x_k1, extr=None):
    """3x30 Jacobian with the same column layout as the IMU residual."""
    e = extr or pre.extr
    R_OBt = e.R_odom_in_body.T
    p_OB = e.p_odom_in_body
    Rkt = rot_from_quat(x_k.q).T
    lever = Rkt @ rot_from_quat(x_k1.q)
    J = np.zeros((3, 30))
    J[:, 0:3] = -R_OBt @ Rkt
    J[:, 6:9] = R_OBt @ skew(Rkt @ (x_k1.p - x_k.p) + lever @ p_OB)
    J[:, 12:15] = -pre.Jp_bg
    J[:, 15:18] = R_OBt @ Rkt
    J[:, 21:24] = -R_OBt @ lever @ skew(p_OB)
    return J


def wheel_residual_covariance(pre):
    S = pre.cov[P, P]
    ev = np.linalg.eigvalsh(S)
    if ev.min() < -1e-12 * max(ev.max(), 1e-300):
        raise InternalConsistencyError("wheel displacement covariance is not PSD")
    return S


class WheelFactorBatch:
    """Stacked wheel factors; ``evaluate`` returns whitened residuals (N, 3)
    and Jacobians (N, 3, 30)."""

    def __init__(self, pres, extr):
        self.n = len(pres)
        self.extr = extr
        if not self.n:
            return
        self.p = np.array([w.p for w in pres])
        self.Jp = np.array([w.Jp_bg for w in pres])
        self.bg_ref = np.array([w.bg_ref for w in pres])
        self.W = np.array([w.sqrt_info() for w in pres])

    def evaluate(self, Pos, Q, Bg, jacobian=True):
        m = self.n + 1
        Pos, Q, Bg = Pos[:m], Q[:m], Bg[:m]
        R_OBt = self.extr.R_odom_in_body.T
        p_OB = self.extr.p_odom_in_body
        dbg = Bg[:-1] - self.bg_ref
        if np.any(np.linalg.norm(dbg, axis=1) >= REPROPAGATE_THRESHOLD):
            raise RepropagationRequired("gyro bias shift exceeds first-order validity")
        Rk = batch_rot_from_quat(Q[:-1])
        Rkt = np.transpose(Rk, (0, 2, 1))
        lever = Rkt @ batch_rot_from_quat(Q[1:])
        moved = np.einsum("nij,nj->ni", Rkt, Pos[1:] - Pos[:-1]) + lever @ p_OB
        r = moved @ R_OBt.T - R_OBt @ p_OB - (self.p + np.einsum("nij,nj->ni", self.Jp, dbg))
        rw = np.einsum("nij,nj->ni", self.W, r)
        if not jacobian:
            return rw, None
        J = np.zeros((self.n, 3, 30))
        J[:, :, 0:3] = -R_OBt @ Rkt
        J[:, :, 6:9] = R_OBt @ batch_skew(moved)
        J[:, :, 12:15] = -self.Jp
        J[:, :, 15:18] = R_OBt @ Rkt
        J[:, :, 21:24] = -R_OBt @ lever @ skew(p_OB)
        return rw, self.W @ J
