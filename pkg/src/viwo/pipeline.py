"""Sensor time alignment: frame downsampling, interpolation, wheel/IMU pre-fusion
and per-frame bundling."""

import bisect
from dataclasses import dataclass, field

import numpy as np

from .errors import ExtrapolationError, GapError

TIME_TOL = 1e-9
GAP_FACTOR = 1.5


@dataclass(eq=False)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)


@dataclass(eq=False)
class WheelSample:
    t: float
    vx: float
    vy: float
    omega: float


@dataclass(eq=False)
class PreFusedWheelMeas:
    """Planar wheel displacement over ``[t0, t1]`` with time-aligned IMU averages.

    ``delta_theta`` is the wheel-measured yaw increment, used only while the
    system is initializing.
    """

    t0: float
    t1: float
    delta_p: np.ndarray
    avg_accel: np.ndarray
    avg_gyro: np.ndarray
    delta_theta: float = 0.0

    @property
    def dt(self):
        return self.t1 - self.t0


@dataclass(eq=False)
class Frame:
    t: float
    features: list = field(default_factory=list)  # (feature_id, u, v)


@dataclass(eq=False)
class FrameBundle:
    frame_t: float
    features: list
    imu: list
    wheel: list
    prev_t: float = None


def _time_of(item):
    return float(item) if isinstance(item, (int, float, np.floating)) else float(item.t)


def downsample_frames(frames, target_hz):
    """Greedy walk keeping frames at least one target period apart."""
    out = []
    min_gap = (1.0 / target_hz) * (1.0 - 1e-6)
    last = None
    for f in frames:
        t = _time_of(f)
        if last is None or t - last >= min_gap:
            out.append(f)
            last = t
    return out


def interpolate_imu(samples, t):
    times = [s.t for s in samples]
    if not times or t < times[0] - TIME_TOL or t > times[-1] + TIME_TOL:
        raise ExtrapolationError(f"IMU interpolation at t={t:.9f} outside sample range")
    k = bisect.bisect_left(times, t - TIME_TOL)
    if abs(times[k] - t) <= TIME_TOL:
        return samples[k]
    a, b = samples[k - 1], samples[k]
    w = (t - a.t) / (b.t - a.t)
    return ImuSample(t, (1.0 - w) * a.accel + w * b.accel, (1.0 - w) * a.gyro + w * b.gyro)


class ImuStream:
    """Array view of an IMU stream for fast lookups."""

    def __init__(self, samples):
        self.samples = list(samples)
        self.t = np.array([s.t for s in self.samples], dtype=float)
        self.accel = np.array([s.accel for s in self.samples], dtype=float).reshape(-1, 3)
        self.gyro = np.array([s.gyro for s in self.samples], dtype=float).reshape(-1, 3)
        # running integral of the held signal; sample k holds over (t[k-1], t[k]]
        dt = np.diff(self.t, prepend=self.t[:1])[:, None]
        self._cum = np.cumsum(np.hstack((self.accel, self.gyro)) * dt, axis=0)

    def __len__(self):
        return len(self.samples)

    def at(self, t):
        if len(self.t) == 0 or t < self.t[0] - TIME_TOL or t > self.t[-1] + TIME_TOL:
            raise ExtrapolationError(f"IMU interpolation at t={t:.9f} outside sample range")
        k = int(np.searchsorted(self.t, t - TIME_TOL))
        if abs(self.t[k] - t) <= TIME_TOL:
            return self.samples[k]
        w = (t - self.t[k - 1]) / (self.t[k] - self.t[k - 1])
        return ImuSample(
            t,
            (1.0 - w) * self.accel[k - 1] + w * self.accel[k],
            (1.0 - w) * self.gyro[k - 1] + w * self.gyro[k],
        )

    def _integral(self, t):
        if len(self.t) == 0 or t < self.t[0] - TIME_TOL or t > self.t[-1] + TIME_TOL:
            raise ExtrapolationError(f"IMU integration at t={t:.9f} outside sample range")
        k = int(np.searchsorted(self.t, t - TIME_TOL))
        if k == 0:
            return np.zeros(6)
        held = np.concatenate((self.accel[k], self.gyro[k]))
        return self._cum[k - 1] + (t - self.t[k - 1]) * held

    def held_mean(self, t0, t1):
        """Time averages of accel and gyro over ``(t0, t1]`` treating each
        sample as constant over its preceding period."""
        m = (self._integral(t1) - self._integral(t0)) / (t1 - t0)
        return m[:3], m[3:]

    def index_range(self, t0, t1):
        """Indices of samples with t0 < t <= t1 (1e-9 tolerance)."""
        lo = int(np.searchsorted(self.t, t0 + TIME_TOL, side="right"))
        hi = int(np.searchsorted(self.t, t1 + TIME_TOL, side="right"))
        return lo, hi


class WheelStream:
    def __init__(self, samples):
        self.samples = list(samples)
        self.t = np.array([s.t for s in self.samples], dtype=float)
        self.vel = np.array([(s.vx, s.vy, s.omega) for s in self.samples], dtype=float).reshape(-1, 3)

    def velocity_at(self, t):
        if len(self.t) == 0 or t < self.t[0] - TIME_TOL or t > self.t[-1] + TIME_TOL:
            raise ExtrapolationError(f"wheel interpolation at t={t:.9f} outside sample range")
        k = int(np.searchsorted(self.t, t - TIME_TOL))
        if abs(self.t[k] - t) <= TIME_TOL:
            return self.vel[k]
        w = (t - self.t[k - 1]) / (self.t[k] - self.t[k - 1])
        return (1.0 - w) * self.vel[k - 1] + w * self.vel[k]


def _check_gaps(name, times, t0, t1, period):
    limit = GAP_FACTOR * period
    pts = np.concatenate(([t0], times[(times > t0) & (times < t1)], [t1]))
    gaps = np.diff(pts)
    if len(gaps) and gaps.max() > limit + TIME_TOL:
        k = int(np.argmax(gaps))
        raise GapError(name, pts[k], pts[k + 1], limit)


def prefuse(wheel, imu, span, wheel_period=0.01, imu_period=0.005):
    """Pre-fused wheel measurements tiling ``span``.

    Interval ends are the span limits plus every wheel sample strictly inside.
    Each interval takes the wheel velocity at its later end (linearly
    interpolated off-grid) and the time average of the held IMU signal over
    the interval, the same hold the inertial preintegration assumes.
    """
    ws = wheel if isinstance(wheel, WheelStream) else WheelStream(wheel)
    ims = imu if isinstance(imu, ImuStream) else ImuStream(imu)
    t0, t1 = float(span[0]), float(span[1])
    _check_gaps("wheel", ws.t, t0, t1, wheel_period)
    _check_gaps("imu", ims.t, t0, t1, imu_period)
    inner = ws.t[(ws.t > t0 + TIME_TOL) & (ws.t < t1 - TIME_TOL)]
    grid = np.concatenate(([t0], inner, [t1]))
    out = []
    for a, b in zip(grid[:-1], grid[1:]):
        dt = b - a
        vx, vy, om = ws.velocity_at(b)
        acc, gyr = ims.held_mean(a, b)
        out.append(PreFusedWheelMeas(
            float(a), float(b), np.array([vx * dt, vy * dt, 0.0]), acc, gyr, float(om * dt)))
    return out


def bundle(frames, imu, wheel, wheel_period=0.01, imu_period=0.005):
    """Package each frame with the IMU samples and pre-fused wheel
    measurements of ``(previous frame, frame]``.

    The first bundle has no inertial data. If a frame time falls between IMU
    samples, an interpolated sample at the frame time closes the span.
    """
    ims = imu if isinstance(imu, ImuStream) else ImuStream(imu)
    ws = wheel if isinstance(wheel, WheelStream) else WheelStream(wheel)
    out = []
    prev_t = None
    for f in frames:
        t = float(f.t)
        if len(ims) == 0 or t < ims.t[0] - TIME_TOL or t > ims.t[-1] + TIME_TOL:
            raise GapError("imu", t, t, 0.0)
        if len(ws.t) == 0 or t < ws.t[0] - TIME_TOL or t > ws.t[-1] + TIME_TOL:
            raise GapError("wheel", t, t, 0.0)
        if prev_t is None:
            out.append(FrameBundle(t, list(f.features), [], [], None))
        else:
            lo, hi = ims.index_range(prev_t, t)
            samples = ims.samples[lo:hi]
            if not samples or abs(samples[-1].t - t) > TIME_TOL:
                samples.append(ims.at(t))
            meas = prefuse(ws, ims, (prev_t, t), wheel_period, imu_period)
            out.append(FrameBundle(t, list(f.features), samples, meas, prev_t))
        prev_t = t
    return out


def fill_frame_gaps(frames, hz):
    """Insert featureless frames wherever the camera stream is silent for more
    than 1.5 periods, so inertial and wheel data keep flowing."""
    period = 1.0 / hz
    out = []
    for f in frames:
        if out:
            last = out[-1].t
            while f.t - last > GAP_FACTOR * period:
                last += period
                out.append(Frame(last, []))
        out.append(f)
    return out
