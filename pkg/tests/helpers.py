"""Shared fixtures-as-functions for the test suite."""

import math

import numpy as np

from viwo.imu_preint import ImuPreintegration, NoiseParams, imu_residual
from viwo.initializer import InitInterval
from viwo.pipeline import ImuSample, PreFusedWheelMeas
from viwo.rotmath import quat_from_small_angle, quat_mul, rot_from_quat
from viwo.runner import make_bundles
from viwo.simulator import Rates, TrajectorySpec, synthesize
from viwo.state import Extrinsics, KeyframeState
from viwo.vision import CameraModel, FeatureTrack, project, visual_residual
from viwo.wheel_odom import WheelPreintegration, wheel_residual

CAM = CameraModel()


def random_quat(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def random_state(rng, t=0.0, bias=0.05):
    return KeyframeState(
        rng.uniform(-3, 3, 3), rng.uniform(-1, 1, 3), random_quat(rng),
        bias * rng.standard_normal(3), 0.2 * bias * rng.standard_normal(3), t,
    )


def random_extrinsics(rng):
    return Extrinsics(
        R_cam_in_body=_rot(quat_from_small_angle(rng.uniform(-1, 1, 3))),
        p_cam_in_body=rng.uniform(-0.3, 0.3, 3),
        R_odom_in_body=_rot(quat_from_small_angle(rng.uniform(-0.3, 0.3, 3))),
        p_odom_in_body=rng.uniform(-0.3, 0.3, 3),
    )


def _rot(q):
    return rot_from_quat(q)


def random_imu_samples(rng, n=50, dt=0.005, t0=0.0):
    out = []
    for k in range(1, n + 1):
        a = np.array([0.0, 0.0, 9.81]) + rng.standard_normal(3)
        out.append(ImuSample(t0 + k * dt, a, 0.5 * rng.standard_normal(3)))
    return out


def random_imu_pre(rng, n=50, dt=0.005, noise=None):
    ba = 0.05 * rng.standard_normal(3)
    bg = 0.01 * rng.standard_normal(3)
    return ImuPreintegration.from_samples(random_imu_samples(rng, n, dt), 0.0, ba, bg, noise or NoiseParams())


def random_wheel_meas(rng, n=20, dt=0.01, t0=0.0):
    out = []
    for k in range(n):
        v = np.array([0.5 + 0.2 * rng.standard_normal(), 0.1 * rng.standard_normal(), 0.0])
        out.append(PreFusedWheelMeas(t0 + k * dt, t0 + (k + 1) * dt, v * dt, np.array([0, 0, 9.81]),
                                     0.3 * rng.standard_normal(3), 0.0))
    return out


def random_wheel_pre(rng, extr, n=20, noise=None):
    bg = 0.01 * rng.standard_normal(3)
    return WheelPreintegration.from_meas(random_wheel_meas(rng, n), extr, bg, noise or NoiseParams(), 0.0)


def numeric_jacobian(f, states, eps=1e-6):
    """Central differences of ``f(states)`` w.r.t. the stacked 15-dim error
    states of ``states`` (retracted on the right)."""
    f0 = np.asarray(f(states))
    J = np.zeros((f0.size, 15 * len(states)))
    for k in range(len(states)):
        for i in range(15):
            d = np.zeros(15)
            d[i] = eps
            plus = list(states)
            minus = list(states)
            plus[k] = states[k].retract(d)
            minus[k] = states[k].retract(-d)
            J[:, 15 * k + i] = (np.asarray(f(plus)) - np.asarray(f(minus))).ravel() / (2 * eps)
    return J


def sim_bundles(kind="circle", duration=4.0, seed=0, faults=None, noise=None):
    sim = synthesize(TrajectorySpec(kind, duration=duration), faults=faults, noise=noise, seed=seed)
    return sim, make_bundles(sim.imu, sim.wheel, sim.frames)


def sim_window(mode="fused", n_frames=6, every=3, duration=4.0, kind="circle", seed=0):
    """Window of ground-truth keyframes built from a noise-free simulation.

    Frames are every ``every``-th camera bundle. Tracks whose depth cannot be
    triangulated from the true poses are removed, so all residuals vanish.
    """
    from viwo import vision
    from viwo.estimator import EstimatorConfig, SlidingWindow, gauge_prior

    sim, bundles = sim_bundles(kind, duration, seed)
    cfg = EstimatorConfig(mode=mode, window_size=max(n_frames, 2))
    w = SlidingWindow(cfg)
    picks = [every * k for k in range(n_frames)]
    for a, b in zip([None] + picks[:-1], picks):
        bd = bundles[b]
        g = sim.ground_truth_fn(bd.frame_t)
        x = KeyframeState(g.p, g.v, g.q, np.zeros(3), np.zeros(3), bd.frame_t)
        f = w.new_frame(bd.frame_t, x, True)
        if a is not None:
            span = bundles[a + 1:b + 1]
            t0 = bundles[a].frame_t
            w.imu.append(ImuPreintegration.from_samples([s for c in span for s in c.imu], t0,
                                                        None, None, cfg.noise))
            w.wheel.append(WheelPreintegration.from_meas([m for c in span for m in c.wheel],
                                                         cfg.extr, None, cfg.noise, t0))
        if cfg.use_vision:
            w.add_observations(f, bd.features)
    w.prior = gauge_prior(w.frames[0])
    states = w.states_by_id()
    for tid in list(w.tracks):
        tr = w.tracks[tid]
        if len(tr.obs) < 2:
            del w.tracks[tid]
            continue
        tr.inv_depth = vision.triangulate_inv_depth(tr, states, cfg.extr, cfg.cam)
        tr.triangulated = True
        if tr.inv_depth == 1.0 / vision.FALLBACK_DEPTH:
            del w.tracks[tid]
    return w, sim


def euler_oracle(samples, t0, ba, bg, substeps=1):
    """Independent Euler recursion on the later sample of each step, with
    optional substepping (inputs held constant inside a step)."""
    alpha, beta = np.zeros(3), np.zeros(3)
    R = np.eye(3)
    t = t0
    for s in samples:
        h = (s.t - t) / substeps
        a = s.accel - ba
        w = s.gyro - bg
        for _ in range(substeps):
            alpha = alpha + beta * h + 0.5 * (R @ a) * h * h
            beta = beta + (R @ a) * h
            R = R @ rot_from_quat(quat_from_small_angle(w * h))
        t = s.t
    return alpha, beta, R


def wheel_oracle(ms, R_OB, bg, substeps=1):
    """Independent recursion: rotate each displacement by the accumulated
    odometer rotation, then integrate the gyro (optionally in substeps)."""
    p, R = np.zeros(3), np.eye(3)
    for m in ms:
        w = R_OB.T @ (m.avg_gyro - bg)
        for _ in range(substeps):
            p = p + R @ (m.delta_p / substeps)
            R = R @ rot_from_quat(quat_from_small_angle(w * m.dt / substeps))
    return p, R


def gt_state(sim, t):
    g = sim.ground_truth_fn(t)
    return KeyframeState(g.p, g.v, g.q, np.zeros(3), np.zeros(3), t)


def residual_extremes(spec):
    """Largest IMU residual and largest planar / vertical wheel residuals
    at ground-truth states over 0.5 s intervals."""
    sim = synthesize(spec, rates=Rates(camera=2.0))
    imu_max = planar_max = vertical_max = 0.0
    for b in make_bundles(sim.imu, sim.wheel, sim.frames, camera_hz=2.0)[1:]:
        x0, x1 = gt_state(sim, b.prev_t), gt_state(sim, b.frame_t)
        imu = ImuPreintegration.from_samples(b.imu, b.prev_t)
        wheel = WheelPreintegration.from_meas(b.wheel, sim.extr, None, None, b.prev_t)
        imu_max = max(imu_max, np.abs(imu_residual(imu, x0, x1)).max())
        rw = wheel_residual(wheel, x0, x1)
        planar_max = max(planar_max, np.abs(rw[:2]).max())
        # the planar wheel model cannot see ground undulation
        vertical_max = max(vertical_max, abs(rw[2] - (x1.p - x0.p)[2]))
    return imu_max, planar_max, vertical_max


def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.logspace(0, math.log10(cond), n)) @ Q.T


def camera_point(x, extr, Pw):
    return extr.R_cam_in_body.T @ (x.R.T @ (Pw - x.p) - extr.p_cam_in_body)


def world_point(x, extr, Pc):
    return x.R @ (extr.R_cam_in_body @ Pc + extr.p_cam_in_body) + x.p


def random_config(rng, extr=None, noise_px=0.0):
    """Host/target states, extrinsics and a track observed in both."""
    extr = extr or random_extrinsics(rng)
    xi = KeyframeState(rng.uniform(-2, 2, 3), np.zeros(3), random_quat(rng))
    xj = KeyframeState(xi.p + rng.uniform(-0.5, 0.5, 3), np.zeros(3),
                       quat_mul(xi.q, quat_from_small_angle(rng.uniform(-0.2, 0.2, 3))))
    while True:
        Pc = np.array([rng.uniform(-1, 1), rng.uniform(-0.8, 0.8), 1.0]) * rng.uniform(2, 8)
        Pw = world_point(xi, extr, Pc)
        Pcj = camera_point(xj, extr, Pw)
        if Pcj[2] > 0.5:
            break
    uj = project(CAM, Pcj) + noise_px * rng.standard_normal(2)
    tr = FeatureTrack(0, 0, 1.0 / Pc[2], {0: tuple(project(CAM, Pc)), 1: tuple(uj)})
    return tr, xi, xj, extr, Pw


def numeric_visual_jacobian(tr, xi, xj, extr, eps=1e-6):
    def f(dx):
        a = KeyframeState(xi.p + dx[0:3], xi.v, quat_mul(xi.q, quat_from_small_angle(dx[3:6])))
        b = KeyframeState(xj.p + dx[6:9], xj.v, quat_mul(xj.q, quat_from_small_angle(dx[9:12])))
        t = FeatureTrack(tr.id, tr.host, tr.inv_depth + dx[12], tr.obs)
        return visual_residual(t, 1, a, b, extr, CAM)
    J = np.zeros((2, 13))
    for k in range(13):
        d = np.zeros(13)
        d[k] = eps
        J[:, k] = (f(d) - f(-d)) / (2 * eps)
    return J


def intervals(bundles, every=3, K=5, start=0):
    """``K`` consecutive spans of ``every`` camera bundles each."""
    marks = [start + every * k for k in range(K + 1)]
    return [InitInterval(bundles[a].frame_t,
                         [s for j in range(a + 1, b + 1) for s in bundles[j].imu],
                         [m for j in range(a + 1, b + 1) for m in bundles[j].wheel])
            for a, b in zip(marks[:-1], marks[1:])]


def gravity_angle_deg(sim, t, g_B0):
    g = rot_from_quat(sim.ground_truth_fn(t).q).T @ np.array([0.0, 0.0, 9.81])
    c = g @ g_B0 / (np.linalg.norm(g) * np.linalg.norm(g_B0))
    return math.degrees(math.acos(min(1.0, c)))
