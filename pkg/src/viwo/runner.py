"""Glue from raw sensor streams to estimator output."""

import numpy as np

from .errors import DivergenceError
from .estimator import Estimator, EstimatorConfig
from .pipeline import bundle, downsample_frames, fill_frame_gaps
from .rotmath import quat_from_yaw
from .state import KeyframeState
from .wheel_odom import dead_reckon


def nominal_period(times, default):
    d = np.diff(np.asarray(times, dtype=float))
    return float(np.median(d)) if d.size else default


def make_bundles(imu, wheel, frames, camera_hz=10.0):
    frames = fill_frame_gaps(downsample_frames(frames, camera_hz), camera_hz)
    t_lo = max(imu[0].t, wheel[0].t)
    t_hi = min(imu[-1].t, wheel[-1].t)
    frames = [f for f in frames if t_lo - 1e-9 <= f.t <= t_hi + 1e-9]
    return bundle(frames, imu, wheel,
                  nominal_period([w.t for w in wheel], 0.01),
                  nominal_period([s.t for s in imu], 0.005))


def run(imu, wheel, frames, config=None, camera_hz=10.0, on_frame=None):
    """Run the selected mode; returns ``(trajectory, estimator)``.

    The trajectory is a list of ``(t, KeyframeState)``. In wheel-odom mode it
    is the planar dead reckoning of the wheel stream with z = 0. A
    ``DivergenceError`` carries the poses finalized before the failure in its
    ``trajectory`` attribute.
    """
    config = config or EstimatorConfig()
    if config.mode == "wheel-odom":
        states = dead_reckon(wheel)
        traj = [(w.t, KeyframeState([s.px, s.py, 0.0], q=quat_from_yaw(s.theta), t=w.t))
                for w, s in zip(wheel, states)]
        return traj, None
    est = Estimator(config)
    try:
        for b in make_bundles(imu, wheel, frames, camera_hz):
            est.process(b)
            if on_frame is not None:
                on_frame(est, b)
    except DivergenceError as e:
        # keep the poses finalized before the failure
        e.trajectory = list(est.window.emitted) if est.window is not None else []
        raise
    return est.trajectory(), est
