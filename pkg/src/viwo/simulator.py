"""Analytic trajectories and synthetic IMU, wheel and feature measurements.

IMU and wheel samples are generated from finite differences of the analytic
trajectory over each sample period, so noise-free Euler integration of the
samples reproduces the ground-truth velocity and rotation increments.
"""

import math
from dataclasses import dataclass

import numpy as np

from .imu_preint import GRAVITY, NoiseParams
from .pipeline import Frame, ImuSample, WheelSample
from .rotmath import quat_from_yaw, rot_from_quat, so3_log
from .state import default_extrinsics
from .vision import CameraModel

KINDS = ("circle", "figure-eight", "corridor-loop", "static")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circle"
    speed: float = 0.5
    duration: float = 60.0
    size: float = 3.0  # circle radius / figure-eight and loop half-extent
    z_undulation_amp: float = 0.0
    z_undulation_period: float = 4.0
    yaw_follows_path: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.duration > 0 or self.speed < 0 or not self.size > 0:
            raise ValueError("trajectory needs duration > 0, speed >= 0, size > 0")


@dataclass(frozen=True)
class FaultSpec:
    slip_windows: tuple = ()  # (t0, t1, factor)
    vision_dropout: tuple = ()  # (t0, t1)
    imu_bias_a: tuple = (0.0, 0.0, 0.0)
    imu_bias_g: tuple = (0.0, 0.0, 0.0)

    def slip_factor(self, t):
        f = 1.0
        for t0, t1, k in self.slip_windows:
            if t0 <= t <= t1:
                f *= k
        return f

    def vision_lost(self, t):
        return any(t0 <= t <= t1 for t0, t1 in self.vision_dropout)


@dataclass(frozen=True)
class Rates:
    imu: float = 200.0
    wheel: float = 100.0
    camera: float = 10.0


@dataclass(frozen=True)
class SimNoise:
    """Measurement noise actually injected by the simulator."""

    imu: NoiseParams = NoiseParams()
    pixel: float = 0.0
    imu_noise: bool = False
    wheel_noise: bool = False


@dataclass(eq=False)
class GroundTruth:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray
    omega: np.ndarray  # body-frame angular rate
    yaw: float


@dataclass(eq=False)
class SimData:
    imu: list
    wheel: list
    frames: list
    gt_t: np.ndarray
    gt_p: np.ndarray
    gt_q: np.ndarray
    landmarks: np.ndarray
    extr: object
    cam: object
    ground_truth_fn: object = None
    n_behind: int = 0


def _planar(spec, t):
    """Planar position, velocity and acceleration at time ``t``."""
    s, L = spec.speed, spec.size
    if spec.kind == "static" or s == 0.0:
        z = np.zeros(2)
        return z, z.copy(), z.copy()
    if spec.kind == "circle":
        w = s / L
        th = w * t
        p = np.array([L * math.sin(th), L - L * math.cos(th)])
        v = np.array([s * math.cos(th), s * math.sin(th)])
        a = np.array([-s * w * math.sin(th), s * w * math.cos(th)])
        return p, v, a
    if spec.kind == "figure-eight":
        # x = L sin(wt), y = L/2 sin(2wt); speed at the crossing is sqrt(2) L w
        w = s / (math.sqrt(2.0) * L)
        p = np.array([L * math.sin(w * t), 0.5 * L * math.sin(2 * w * t)])
        v = np.array([L * w * math.cos(w * t), L * w * math.cos(2 * w * t)])
        a = np.array([-L * w * w * math.sin(w * t), -2 * L * w * w * math.sin(2 * w * t)])
        return p, v, a
    # corridor-loop: ellipse with a 3:1 aspect ratio
    A, B = 3.0 * L, L
    w = s / math.sqrt(0.5 * (A * A + B * B))
    p = np.array([A * math.sin(w * t), B - B * math.cos(w * t)])
    v = np.array([A * w * math.cos(w * t), B * w * math.sin(w * t)])
    a = np.array([-A * w * w * math.sin(w * t), B * w * w * math.cos(w * t)])
    return p, v, a


def _yaw(spec, t):
    """Heading, yaw rate."""
    if not spec.yaw_follows_path or spec.kind == "static" or spec.speed == 0.0:
        return 0.0, 0.0
    if spec.kind == "circle":
        w = spec.speed / spec.size
        return w * t, w
    _, v, a = _planar(spec, t)
    yaw = math.atan2(v[1], v[0])
    rate = (v[0] * a[1] - v[1] * a[0]) / (v @ v)
    return yaw, rate


def ground_truth(spec, t):
    if t < -1e-12 or t > spec.duration + 1e-9:
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    p2, v2, a2 = _planar(spec, t)
    amp, per = spec.z_undulation_amp, spec.z_undulation_period
    k = 2.0 * math.pi / per
    z, vz, az = amp * math.sin(k * t), amp * k * math.cos(k * t), -amp * k * k * math.sin(k * t)
    yaw, rate = _yaw(spec, t)
    return GroundTruth(
        np.array([p2[0], p2[1], z]),
        np.array([v2[0], v2[1], vz]),
        np.array([a2[0], a2[1], az]),
        quat_from_yaw(yaw),
        np.array([0.0, 0.0, rate]),
        yaw,
    )


def sample_times(rate, duration):
    n = int(round(rate * duration))
    return np.arange(n + 1) / rate


def make_landmarks(spec, rng, count=400, clearance=1.5, margin=4.0):
    """Random points around the path, at least ``clearance`` from it."""
    ts = np.linspace(0.0, spec.duration, 400)
    path = np.array([_planar(spec, t)[0] for t in ts])
    lo = path.min(axis=0) - margin
    hi = path.max(axis=0) + margin
    pts = []
    while len(pts) < count:
        xy = rng.uniform(lo, hi, size=(count, 2))
        d = np.min(np.linalg.norm(xy[:, None, :] - path[None, :, :], axis=2), axis=1)
        z = rng.uniform(-0.5, 2.5, size=count)
        for ok, p, h in zip(d > clearance, xy, z):
            if ok and len(pts) < count:
                pts.append((p[0], p[1], h))
    return np.array(pts)


def synthesize(spec, faults=None, landmarks=None, cam=None, extr=None, noise=None, rates=None,
               seed=0, max_features=40, max_range=20.0, n_landmarks=400):
    faults = faults or FaultSpec()
    cam = cam or CameraModel()
    extr = extr or default_extrinsics()
    noise = noise or SimNoise()
    rates = rates or Rates()
    ss = np.random.SeedSequence(seed)
    rng_imu, rng_wheel, rng_pix, rng_lm = (np.random.default_rng(s) for s in ss.spawn(4))
    if landmarks is None:
        landmarks = make_landmarks(spec, rng_lm, n_landmarks)
    imu_n = noise.imu

    # IMU
    t_imu = sample_times(rates.imu, spec.duration)
    gts = [ground_truth(spec, t) for t in t_imu]
    Rs = [rot_from_quat(g.q) for g in gts]
    ba = np.array(faults.imu_bias_a, dtype=float)
    bg = np.array(faults.imu_bias_g, dtype=float)
    imu = []
    dt = 1.0 / rates.imu
    for i, t in enumerate(t_imu):
        if i == 0:
            acc = Rs[0].T @ (gts[0].a + GRAVITY)
            gyr = gts[0].omega.copy()
        else:
            h = t - t_imu[i - 1]
            acc = Rs[i - 1].T @ (gts[i].v - gts[i - 1].v + GRAVITY * h) / h
            gyr = so3_log(Rs[i - 1].T @ Rs[i]) / h
        if noise.imu_noise and i > 0:
            ba = ba + imu_n.sigma_ba * math.sqrt(dt) * rng_imu.standard_normal(3)
            bg = bg + imu_n.sigma_bg * math.sqrt(dt) * rng_imu.standard_normal(3)
        acc = acc + ba
        gyr = gyr + bg
        if noise.imu_noise:
            acc = acc + imu_n.sigma_a / math.sqrt(dt) * rng_imu.standard_normal(3)
            gyr = gyr + imu_n.sigma_g / math.sqrt(dt) * rng_imu.standard_normal(3)
        imu.append(ImuSample(float(t), acc, gyr))

    # wheel: odometer-frame planar velocity over each sample period
    R_OB, p_OB = extr.R_odom_in_body, extr.p_odom_in_body
    t_wh = sample_times(rates.wheel, spec.duration)
    sw = np.asarray(imu_n.sigma_wheel, dtype=float) / math.sqrt(1.0 / rates.wheel)
    wheel = []
    prev = None
    for t in t_wh:
        g = ground_truth(spec, t)
        R_O = rot_from_quat(g.q) @ R_OB
        p_O = g.p + rot_from_quat(g.q) @ p_OB
        if prev is None:
            vel = R_O.T @ (g.v + rot_from_quat(g.q) @ np.cross(g.omega, p_OB))
            om = (R_OB.T @ g.omega)[2]
        else:
            h = t - prev[0]
            vel = prev[1].T @ (p_O - prev[2]) / h
            om = so3_log(prev[1].T @ R_O)[2] / h
        prev = (t, R_O, p_O)
        k = faults.slip_factor(t)
        vx, vy, om = vel[0] * k, vel[1] * k, om * k
        if noise.wheel_noise:
            sp = math.hypot(vx, vy)
            e = rng_wheel.standard_normal(3) * sw * sp
            vx, vy, om = vx + e[0], vy + e[1], om + e[2]
        wheel.append(WheelSample(float(t), float(vx), float(vy), float(om)))

    # features
    t_cam = sample_times(rates.camera, spec.duration)
    R_bc, p_bc = extr.R_cam_in_body, extr.p_cam_in_body
    frames = []
    prev_ids = {}
    next_id = 0
    n_behind = 0
    for t in t_cam:
        if faults.vision_lost(t):
            frames.append(Frame(float(t), []))
            prev_ids = {}
            continue
        g = ground_truth(spec, t)
        R = rot_from_quat(g.q)
        Pc = ((landmarks - g.p) @ R - p_bc) @ R_bc
        z = Pc[:, 2]
        front = z > 0.1
        if not np.any(front):
            n_behind += 1
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * Pc[:, 0] / z + cam.cx
            v = cam.fy * Pc[:, 1] / z + cam.cy
        dist = np.linalg.norm(Pc, axis=1)
        vis = front & (dist < max_range) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        idx = np.flatnonzero(vis)
        # keep continuing tracks first, then new landmarks in index order
        idx = sorted(idx, key=lambda j: (j not in prev_ids, j))
        noise_px = rng_pix.standard_normal((len(landmarks), 2)) * noise.pixel
        feats = []
        ids = {}
        for j in idx:
            if len(feats) >= max_features:
                break
            uu, vv = u[j] + noise_px[j, 0], v[j] + noise_px[j, 1]
            if not cam.in_image(uu, vv):
                continue
            fid = prev_ids.get(j)
            if fid is None:
                fid = next_id
                next_id += 1
            ids[j] = fid
            feats.append((fid, float(uu), float(vv)))
        feats.sort()
        prev_ids = ids
        frames.append(Frame(float(t), feats))

    gt_p = np.array([g.p for g in gts])
    gt_q = np.array([g.q for g in gts])
    return SimData(imu, wheel, frames, t_imu, gt_p, gt_q, landmarks, extr, cam,
                   lambda t: ground_truth(spec, t), n_behind)
