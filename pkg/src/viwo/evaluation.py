"""Start-to-end drift metrics, trajectory association and ATE."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError
from .pipeline import prefuse
from .rotmath import quat_from_yaw, rot_from_quat, wrap_angle, yaw_from_quat
from .wheel_odom import WheelPreintegration

MATCH_TOL = 0.01


@dataclass(frozen=True)
class DriftReport:
    x_err: float
    y_err: float
    position_error: float
    position_error_rate: float
    heading_error: float  # deg, estimate minus truth
    cumulative_translation: float
    cumulative_rotation: float  # deg
    operation_time: float
    ate_rmse: float = 0.0

    def format(self):
        lines = [
            "# drift report (heading_error = estimate - truth, deg)",
            f"x_err = {self.x_err:.6f}",
            f"y_err = {self.y_err:.6f}",
            f"position_error = {self.position_error:.6f}",
            f"position_error_rate = {self.position_error_rate:.4f}",
            f"position_error_rate_percent = {100.0 * self.position_error_rate:.2f}%",
            f"heading_error = {self.heading_error:.6f}",
            f"cumulative_translation = {self.cumulative_translation:.6f}",
            f"cumulative_rotation = {self.cumulative_rotation:.6f}",
            f"operation_time = {self.operation_time:.6f}",
            f"ate_rmse = {self.ate_rmse:.6f}",
        ]
        return "\n".join(lines) + "\n"


def error_rate(position_error, cumulative_translation):
    """Position error divided by the distance travelled."""
    if not cumulative_translation > 0.0:
        return 0.0 if position_error == 0.0 else math.inf
    return position_error / cumulative_translation


def format_rate(rate):
    return f"{100.0 * rate:.2f}%"


def associate(t_est, t_gt, tol=MATCH_TOL):
    """Index pairs ``(i_est, i_gt)`` matching each estimate to its nearest
    ground-truth time within ``tol``."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if t_gt.size == 0 or t_est.size == 0:
        raise AlignmentError("empty trajectory")
    j = np.clip(np.searchsorted(t_gt, t_est), 1, max(t_gt.size - 1, 1))
    j0 = j - 1 if t_gt.size > 1 else np.zeros_like(j)
    j1 = np.minimum(j, t_gt.size - 1)
    nearest = np.where(np.abs(t_gt[j0] - t_est) <= np.abs(t_gt[j1] - t_est), j0, j1)
    ok = np.abs(t_gt[nearest] - t_est) <= tol + 1e-12
    if not np.any(ok):
        raise AlignmentError("no timestamps overlap within tolerance")
    return np.flatnonzero(ok), nearest[ok]


def _yaw_align(q_est0, q_gt0, p_est0, p_gt0):
    """Yaw rotation and translation mapping the first estimate onto truth."""
    dyaw = wrap_angle(yaw_from_quat(q_gt0) - yaw_from_quat(q_est0))
    Rz = rot_from_quat(quat_from_yaw(dyaw))
    return dyaw, Rz, p_gt0 - Rz @ p_est0


def ate_rmse(p_est, p_gt):
    """RMSE after the best yaw + translation fit."""
    p_est = np.asarray(p_est, dtype=float)
    p_gt = np.asarray(p_gt, dtype=float)
    a = p_est - p_est.mean(axis=0)
    b = p_gt - p_gt.mean(axis=0)
    s = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    c = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    Rz = rot_from_quat(quat_from_yaw(math.atan2(s, c)))
    e = b - a @ Rz.T
    return float(math.sqrt(np.mean(np.sum(e * e, axis=1))))


def drift_report(t_est, p_est, q_est, t_gt, p_gt, q_gt, tol=MATCH_TOL):
    """Start-to-end drift of an estimate against ground truth.

    Both trajectories are aligned in yaw and translation at the first matched
    pose; errors are read at the last matched pose. Quaternions are
    ``[w, x, y, z]``.
    """
    p_est, q_est = np.asarray(p_est, dtype=float), np.asarray(q_est, dtype=float)
    p_gt, q_gt = np.asarray(p_gt, dtype=float), np.asarray(q_gt, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    ie, ig = associate(t_est, t_gt, tol)
    s_e, s_g, e_e, e_g = ie[0], ig[0], ie[-1], ig[-1]
    dyaw, Rz, shift = _yaw_align(q_est[s_e], q_gt[s_g], p_est[s_e], p_gt[s_g])
    end = Rz @ p_est[e_e] + shift
    dx, dy = end[:2] - p_gt[e_g][:2]
    pos = math.hypot(dx, dy)
    head = math.degrees(wrap_angle(yaw_from_quat(q_est[e_e]) + dyaw - yaw_from_quat(q_gt[e_g])))
    seg = p_gt[s_g:e_g + 1]
    dist = float(np.sum(np.linalg.norm(np.diff(seg, axis=0), axis=1)))
    yaws = np.array([yaw_from_quat(q) for q in q_gt[s_g:e_g + 1]])
    rot = float(np.degrees(np.sum(np.abs([wrap_angle(d) for d in np.diff(yaws)])))) if yaws.size > 1 else 0.0
    aligned = p_est[ie] @ Rz.T + shift
    return DriftReport(
        x_err=float(dx), y_err=float(dy), position_error=pos,
        position_error_rate=error_rate(pos, dist), heading_error=head,
        cumulative_translation=dist, cumulative_rotation=rot,
        operation_time=float(t_gt[e_g] - t_gt[s_g]),
        ate_rmse=ate_rmse(aligned, p_gt[ig]),
    )


def dead_reckoning_envelope(x0, x1, wheel, imu, extr, noise=None):
    """Compare a fused relative motion with wheel-inertial dead reckoning.

    ``x0`` and ``x1`` are fused states; the wheel stream between their times
    is preintegrated around ``x0``'s gyro bias. Returns ``(error, sigma)``:
    the distance between fused and dead-reckoned end positions, and
    ``sqrt(trace)`` of the dead-reckoning position covariance in the world.
    """
    meas = prefuse(wheel, imu, (x0.t, x1.t))
    pre = WheelPreintegration.from_meas(meas, extr, x0.bg, noise, x0.t)
    R0 = x0.R
    R1 = R0 @ rot_from_quat(pre.q)
    R_OB, p_OB = extr.R_odom_in_body, extr.p_odom_in_body
    p1 = x0.p + R0 @ (R_OB @ pre.p + p_OB) - R1 @ p_OB
    Rw = R0 @ R_OB
    cov = Rw @ pre.cov[:3, :3] @ Rw.T
    return float(np.linalg.norm(p1 - x1.p)), float(math.sqrt(np.trace(cov)))
