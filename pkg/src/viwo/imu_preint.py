"""IMU preintegration between consecutive keyframes.

Error-state order is ``[dalpha, dbeta, dtheta, dba, dbg]``. The covariance
uses the first-order transition ``I + F dt``. The bias Jacobian ``jac`` is
accumulated with the exact one-step Jacobian of the Euler update so that the
first-order bias correction is accurate to second order in the bias shift.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import RejectedSampleError, RepropagationRequired
from .rotmath import (
    batch_quat_conj,
    batch_quat_exp,
    batch_quat_left_vec,
    batch_quat_mul,
    batch_quat_right_vec,
    batch_right_jacobian,
    batch_rot_from_quat,
    batch_skew,
    quat_conj,
    quat_from_small_angle,
    quat_left,
    quat_mul,
    quat_right,
    right_jacobian,
    rot_from_quat,
    skew,
)

GRAVITY = np.array([0.0, 0.0, 9.81])
REPROPAGATE_THRESHOLD = 0.1
MAX_DT = 0.1

A, B, TH, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities.

    ``sigma_wheel`` is a per-axis fraction of the travelled distance.
    """

    sigma_a: float = 0.02
    sigma_g: float = 2e-3
    sigma_ba: float = 1e-3
    sigma_bg: float = 1e-4
    sigma_wheel: tuple = (0.02, 0.02, 0.02)

    def __post_init__(self):
        vals = [self.sigma_a, self.sigma_g, self.sigma_ba, self.sigma_bg, *self.sigma_wheel]
        if len(self.sigma_wheel) != 3 or not all(v > 0 and math.isfinite(v) for v in vals):
            raise ValueError("noise parameters must be finite and strictly positive")


class ImuPreintegration:
    """Accumulated (alpha, beta, q) deltas with covariance and bias Jacobian."""

    def __init__(self, ba_ref=None, bg_ref=None, noise=None, t0=0.0):
        self.alpha = np.zeros(3)
        self.beta = np.zeros(3)
        self.q = np.array([1.0, 0.0, 0.0, 0.0])
        self.ba_ref = np.zeros(3) if ba_ref is None else np.array(ba_ref, dtype=float)
        self.bg_ref = np.zeros(3) if bg_ref is None else np.array(bg_ref, dtype=float)
        self.noise = noise or NoiseParams()
        self.cov = np.zeros((15, 15))
        self.jac = np.eye(15)
        self.dt_sum = 0.0
        self.t0 = float(t0)
        self.samples = []  # (dt, accel, gyro)
        self._sqrt_info = None

    @classmethod
    def from_samples(cls, samples, t0, ba_ref=None, bg_ref=None, noise=None):
        """Integrate ``ImuSample``s whose times follow ``t0``."""
        pre = cls(ba_ref, bg_ref, noise, t0)
        t_prev = t0
        for s in samples:
            pre._step(s.accel, s.gyro, s.t - t_prev)
            t_prev = s.t
        return pre

    @property
    def t1(self):
        return self.t0 + self.dt_sum

    def copy(self):
        out = ImuPreintegration(self.ba_ref, self.bg_ref, self.noise, self.t0)
        out.alpha, out.beta, out.q = self.alpha.copy(), self.beta.copy(), self.q.copy()
        out.cov, out.jac = self.cov.copy(), self.jac.copy()
        out.dt_sum = self.dt_sum
        out.samples = list(self.samples)
        return out

    def _step(self, accel, gyro, dt):
        accel = np.asarray(accel, dtype=float)
        gyro = np.asarray(gyro, dtype=float)
        if not (dt > 0.0) or dt >= MAX_DT:
            raise RejectedSampleError(f"invalid IMU step dt={dt!r}")
        if not (np.all(np.isfinite(accel)) and np.all(np.isfinite(gyro))):
            raise RejectedSampleError("non-finite IMU sample")
        n = self.noise
        R = rot_from_quat(self.q)
        a = accel - self.ba_ref
        w = gyro - self.bg_ref
        dq = quat_from_small_angle(w * dt)
        Ra = R @ a
        Ra_x = R @ skew(a)
        dt2 = dt * dt

        self.alpha = self.alpha + self.beta * dt + 0.5 * Ra * dt2
        self.beta = self.beta + Ra * dt
        self.q = quat_mul(self.q, dq)

        # first-order transition for the covariance
        Fd = np.eye(15)
        Fd[A, B] = np.eye(3) * dt
        Fd[B, TH] = -Ra_x * dt
        Fd[B, BA] = -R * dt
        Fd[TH, TH] -= skew(w) * dt
        Fd[TH, BG] = -np.eye(3) * dt
        # (G dt) Q (G dt)^T with Q = diag(sigma^2 / dt)
        Qd = np.zeros((15, 15))
        Qd[B, B] = (n.sigma_a ** 2 * dt) * (R @ R.T)
        Qd[TH, TH] = np.eye(3) * n.sigma_g ** 2 * dt
        Qd[BA, BA] = np.eye(3) * n.sigma_ba ** 2 * dt
        Qd[BG, BG] = np.eye(3) * n.sigma_bg ** 2 * dt
        cov = Fd @ self.cov @ Fd.T + Qd
        self.cov = 0.5 * (cov + cov.T)

        # exact one-step Jacobian of the Euler update
        Phi = np.eye(15)
        Phi[A, B] = np.eye(3) * dt
        Phi[A, TH] = -0.5 * Ra_x * dt2
        Phi[A, BA] = -0.5 * R * dt2
        Phi[B, TH] = -Ra_x * dt
        Phi[B, BA] = -R * dt
        Phi[TH, TH] = rot_from_quat(dq).T
        Phi[TH, BG] = -right_jacobian(w * dt) * dt
        self.jac = Phi @ self.jac

        self.dt_sum += dt
        self.samples.append((dt, accel, gyro))
        self._sqrt_info = None

    def repropagate(self, ba_ref, bg_ref):
        """Re-integrate the retained samples around new reference biases."""
        out = ImuPreintegration(ba_ref, bg_ref, self.noise, self.t0)
        for dt, a, g in self.samples:
            out._step(a, g, dt)
        return out

    def extended(self, other):
        """Concatenate ``other`` (which must start where this one ends)."""
        out = self.copy()
        for dt, a, g in other.samples:
            out._step(a, g, dt)
        return out

    @property
    def J_alpha_ba(self):
        return self.jac[A, BA]

    @property
    def J_alpha_bg(self):
        return self.jac[A, BG]

    @property
    def J_beta_ba(self):
        return self.jac[B, BA]

    @property
    def J_beta_bg(self):
        return self.jac[B, BG]

    @property
    def J_q_bg(self):
        return self.jac[TH, BG]

    def sqrt_info(self):
        """Upper factor ``W`` with ``W^T W = cov^-1``."""
        if self._sqrt_info is None:
            L = np.linalg.cholesky(self.cov + 1e-18 * np.eye(15))
            self._sqrt_info = np.linalg.inv(L)
        return self._sqrt_info


def propagate(pre, sample, dt):
    """One Euler step using ``sample``; returns a new preintegration."""
    out = pre.copy()
    out._step(sample.accel, sample.gyro, dt)
    return out


def bias_corrected_delta(pre, ba, bg):
    dba = np.asarray(ba, dtype=float) - pre.ba_ref
    dbg = np.asarray(bg, dtype=float) - pre.bg_ref
    if np.linalg.norm(dba) >= REPROPAGATE_THRESHOLD or np.linalg.norm(dbg) >= REPROPAGATE_THRESHOLD:
        raise RepropagationRequired("bias shift exceeds first-order validity")
    alpha = pre.alpha + pre.J_alpha_ba @ dba + pre.J_alpha_bg @ dbg
    beta = pre.beta + pre.J_beta_ba @ dba + pre.J_beta_bg @ dbg
    q = quat_mul(pre.q, quat_from_small_angle(pre.J_q_bg @ dbg))
    return alpha, beta, q


def imu_residual(pre, x_k, x_k1, gravity=GRAVITY):
    dt = pre.dt_sum
    alpha, beta, q_corr = bias_corrected_delta(pre, x_k.ba, x_k.bg)
    Rt = rot_from_quat(x_k.q).T
    r = np.empty(15)
    r[A] = Rt @ (x_k1.p - x_k.p - x_k.v * dt + 0.5 * gravity * dt * dt) - alpha
    r[B] = Rt @ (x_k1.v - x_k.v + gravity * dt) - beta
    err = quat_mul(quat_mul(quat_conj(q_corr), quat_conj(x_k.q)), x_k1.q)
    r[TH] = 2.0 * (err[1:] if err[0] >= 0.0 else -err[1:])
    r[BA] = x_k1.ba - x_k.ba
    r[BG] = x_k1.bg - x_k.bg
    return r


def imu_residual_jacobian(pre, x_k, x_k1, gravity=GRAVITY):
    """15x30 Jacobian w.r.t. ``[dp, dv, dtheta, dba, dbg]`` of both states."""
    dt = pre.dt_sum
    Rt = rot_from_quat(x_k.q).T
    dbg = x_k.bg - pre.bg_ref
    phi0 = pre.J_q_bg @ dbg
    q_corr = quat_mul(pre.q, quat_from_small_angle(phi0))
    qc_conj = quat_conj(q_corr)
    rel = quat_mul(quat_conj(x_k.q), x_k1.q)
    err = quat_mul(qc_conj, rel)
    sign = 1.0 if err[0] >= 0.0 else -1.0

    J = np.zeros((15, 30))
    J[A, 0:3] = -Rt
    J[A, 3:6] = -Rt * dt
    J[A, 6:9] = skew(Rt @ (x_k1.p - x_k.p - x_k.v * dt + 0.5 * gravity * dt * dt))
    J[A, 9:12] = -pre.J_alpha_ba
    J[A, 12:15] = -pre.J_alpha_bg
    J[A, 15:18] = Rt

    J[B, 3:6] = -Rt
    J[B, 6:9] = skew(Rt @ (x_k1.v - x_k.v + gravity * dt))
    J[B, 9:12] = -pre.J_beta_ba
    J[B, 12:15] = -pre.J_beta_bg
    J[B, 18:21] = Rt

    J[TH, 6:9] = -sign * (quat_left(qc_conj) @ quat_right(rel))[1:, 1:]
    J[TH, 12:15] = -sign * quat_right(err)[1:, 1:] @ right_jacobian(phi0) @ pre.J_q_bg
    J[TH, 21:24] = sign * quat_left(err)[1:, 1:]

    J[BA, 9:12] = -np.eye(3)
    J[BA, 24:27] = np.eye(3)
    J[BG, 12:15] = -np.eye(3)
    J[BG, 27:30] = np.eye(3)
    return J


class ImuFactorBatch:
    """Stacked IMU factors between consecutive frames ``k`` and ``k + 1``.

    ``evaluate`` takes per-frame state arrays (only the first N + 1 rows are
    used) and returns whitened residuals (N, 15) and Jacobians (N, 15, 30).
    """

    def __init__(self, pres, gravity=GRAVITY):
        self.n = len(pres)
        self.gravity = gravity
        if not self.n:
            return
        self.alpha = np.array([p.alpha for p in pres])
        self.beta = np.array([p.beta for p in pres])
        self.q = np.array([p.q for p in pres])
        self.dt = np.array([p.dt_sum for p in pres])
        self.ba_ref = np.array([p.ba_ref for p in pres])
        self.bg_ref = np.array([p.bg_ref for p in pres])
        jac = np.array([p.jac for p in pres])
        self.Jab, self.Jag = jac[:, A, BA], jac[:, A, BG]
        self.Jbb, self.Jbg = jac[:, B, BA], jac[:, B, BG]
        self.Jqg = jac[:, TH, BG]
        self.W = np.array([p.sqrt_info() for p in pres])

    def evaluate(self, P, V, Q, Ba, Bg, jacobian=True):
        m = self.n + 1
        P, V, Q, Ba, Bg = P[:m], V[:m], Q[:m], Ba[:m], Bg[:m]
        dt = self.dt[:, None]
        g = self.gravity
        dba = Ba[:-1] - self.ba_ref
        dbg = Bg[:-1] - self.bg_ref
        if np.any(np.linalg.norm(dba, axis=1) >= REPROPAGATE_THRESHOLD) or \
                np.any(np.linalg.norm(dbg, axis=1) >= REPROPAGATE_THRESHOLD):
            raise RepropagationRequired("bias shift exceeds first-order validity")
        mv = lambda M, x: np.einsum("nij,nj->ni", M, x)
        alpha = self.alpha + mv(self.Jab, dba) + mv(self.Jag, dbg)
        beta = self.beta + mv(self.Jbb, dba) + mv(self.Jbg, dbg)
        phi0 = mv(self.Jqg, dbg)
        qc = batch_quat_mul(self.q, batch_quat_exp(phi0))
        Rk = batch_rot_from_quat(Q[:-1])
        Rkt = np.transpose(Rk, (0, 2, 1))
        ya = mv(Rkt, P[1:] - P[:-1] - V[:-1] * dt + 0.5 * g * dt * dt)
        yb = mv(Rkt, V[1:] - V[:-1] + g * dt)
        qc_conj = batch_quat_conj(qc)
        rel = batch_quat_mul(batch_quat_conj(Q[:-1]), Q[1:])
        err = batch_quat_mul(qc_conj, rel)
        sign = np.where(err[:, 0] >= 0.0, 1.0, -1.0)
        r = np.concatenate((ya - alpha, yb - beta, 2.0 * sign[:, None] * err[:, 1:],
                            Ba[1:] - Ba[:-1], Bg[1:] - Bg[:-1]), axis=1)
        rw = mv(self.W, r)
        if not jacobian:
            return rw, None
        n = self.n
        I3 = np.eye(3)
        J = np.zeros((n, 15, 30))
        J[:, A, 0:3] = -Rkt
        J[:, A, 3:6] = -Rkt * dt[:, :, None]
        J[:, A, 6:9] = batch_skew(ya)
        J[:, A, 9:12] = -self.Jab
        J[:, A, 12:15] = -self.Jag
        J[:, A, 15:18] = Rkt
        J[:, B, 3:6] = -Rkt
        J[:, B, 6:9] = batch_skew(yb)
        J[:, B, 9:12] = -self.Jbb
        J[:, B, 12:15] = -self.Jbg
        J[:, B, 18:21] = Rkt
        # lower-right blocks of the 4x4 quaternion product matrices
        LR = (-np.einsum("ni,nj->nij", qc_conj[:, 1:], rel[:, 1:])
              + batch_quat_left_vec(qc_conj) @ batch_quat_right_vec(rel))
        s = sign[:, None, None]
        J[:, TH, 6:9] = -s * LR
        J[:, TH, 12:15] = -s * batch_quat_right_vec(err) @ batch_right_jacobian(phi0) @ self.Jqg
        J[:, TH, 21:24] = s * batch_quat_left_vec(err)
        J[:, BA, 9:12] = -I3
        J[:, BA, 24:27] = I3
        J[:, BG, 12:15] = -I3
        J[:, BG, 27:30] = I3
        return rw, self.W @ J
