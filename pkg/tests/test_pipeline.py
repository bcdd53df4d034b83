import math

import numpy as np
import pytest

from viwo.errors import ExtrapolationError, GapError
from viwo.pipeline import (
    Frame,
    ImuSample,
    ImuStream,
    WheelSample,
    bundle,
    downsample_frames,
    fill_frame_gaps,
    interpolate_imu,
    prefuse,
)
from viwo.simulator import TrajectorySpec, synthesize
from viwo.wheel_odom import dead_reckon


def imu_stream(rate, duration, rng=None):
    n = int(round(rate * duration))
    rng = rng or np.random.default_rng(0)
    return [ImuSample(k / rate, rng.standard_normal(3), rng.standard_normal(3)) for k in range(n + 1)]


def wheel_stream(rate, duration, vx=1.0, vy=0.0, omega=0.0):
    n = int(round(rate * duration))
    return [WheelSample(k / rate, vx, vy, omega) for k in range(n + 1)]


@pytest.mark.parametrize("src_hz, keep_every", [(30.0, 3), (10.0, 1), (20.0, 2)])
def test_downsample_regular(src_hz, keep_every):
    times = [k / src_hz for k in range(int(src_hz * 3) + 1)]
    out = downsample_frames(times, 10.0)
    assert out == times[::keep_every]


def test_downsample_greedy_walk():
    assert downsample_frames([0, 0.033, 0.067, 0.100, 0.133], 10.0) == [0, 0.100]
    assert downsample_frames([], 10.0) == []


def test_interpolate_imu():
    s = [ImuSample(0.0, [0, 0, 0], [1, 2, 3]), ImuSample(1.0, [10, 20, 30], [3, 2, 1])]
    assert interpolate_imu(s, 1.0) is s[1]
    mid = interpolate_imu(s, 0.5)
    assert np.allclose(mid.accel, [5, 10, 15]) and np.allclose(mid.gyro, [2, 2, 2])
    p = interpolate_imu(s, 0.3)
    assert np.allclose(p.accel, 0.7 * s[0].accel + 0.3 * s[1].accel, atol=1e-15)
    assert np.allclose(p.gyro, 0.7 * s[0].gyro + 0.3 * s[1].gyro, atol=1e-15)
    with pytest.raises(ExtrapolationError):
        interpolate_imu(s, 1.5)
    with pytest.raises(ExtrapolationError):
        interpolate_imu(s, -0.1)


def test_interpolation_idempotent():
    s = imu_stream(200, 0.5)
    st = ImuStream(s)
    for x in s:
        assert interpolate_imu(s, x.t) is x
        assert st.at(x.t) is x


def test_prefuse_constant_velocity():
    imu = imu_stream(200, 0.02)
    wheel = wheel_stream(100, 0.02)
    meas = prefuse(wheel, imu, (0.0, 0.01))
    assert len(meas) == 1
    assert np.allclose(meas[0].delta_p, [0.01, 0, 0], atol=1e-15)


def test_prefuse_gyro_is_held_time_average():
    """Sample k holds over its preceding period, so an interval straddling
    sample boundaries averages the overlapped samples by overlap length."""
    imu = [ImuSample(0.005 * k, [k, 0.0, 9.81], [0.0, 0.0, 0.1 * k]) for k in range(9)]
    wheel = [WheelSample(0.01 * k, 0.5, 0.0, 0.0) for k in range(5)]
    meas = prefuse(wheel, imu, (0.0075, 0.03))
    assert [(m.t0, m.t1) for m in meas] == [(0.0075, 0.01), (0.01, 0.02), (0.02, 0.03)]
    # (0.0075, 0.01] lies inside sample 2's period; (0.01, 0.02] covers samples 3 and 4
    assert meas[0].avg_gyro[2] == pytest.approx(0.2, abs=1e-12)
    assert meas[1].avg_gyro[2] == pytest.approx(0.35, abs=1e-12)
    assert meas[2].avg_accel[0] == pytest.approx(5.5, abs=1e-12)


def test_prefuse_zero_speed():
    meas = prefuse(wheel_stream(100, 1.0, 0.0), imu_stream(200, 1.0), (0.0, 1.0))
    assert all(np.all(m.delta_p == 0) for m in meas)
    assert all(m.delta_p[2] == 0 for m in meas)


def test_prefuse_tiles_span():
    meas = prefuse(wheel_stream(100, 1.0), imu_stream(200, 1.0), (0.123, 0.877))
    assert meas[0].t0 == 0.123 and meas[-1].t1 == 0.877
    assert all(abs(a.t1 - b.t0) < 1e-15 for a, b in zip(meas[:-1], meas[1:]))


def test_prefuse_gap_error_names_interval():
    wheel = [w for w in wheel_stream(100, 1.0) if not 0.4 < w.t < 0.6]
    with pytest.raises(GapError) as e:
        prefuse(wheel, imu_stream(200, 1.0), (0.0, 1.0))
    assert e.value.stream == "wheel"
    assert e.value.t0 == pytest.approx(0.4) and e.value.t1 == pytest.approx(0.6)


def test_prefuse_path_length_matches_dead_reckoning():
    wheel = [WheelSample(k / 100, 0.5 + 0.3 * math.sin(k / 10), 0.1 * math.cos(k / 7), 0.0) for k in range(201)]
    meas = prefuse(wheel, imu_stream(200, 2.0), (0.0, 2.0))
    length = sum(np.linalg.norm(m.delta_p) for m in meas)
    states = dead_reckon(wheel)
    dr = sum(math.hypot(b.px - a.px, b.py - a.py) for a, b in zip(states[:-1], states[1:]))
    assert abs(length - dr) < 1e-9


def test_prefuse_simulated_path_length():
    spec = TrajectorySpec("circle", speed=0.5, duration=10.0)
    sim = synthesize(spec, seed=0)
    meas = prefuse(sim.wheel, sim.imu, (0.0, 10.0))
    length = sum(np.linalg.norm(m.delta_p) for m in meas)
    assert abs(length - 5.0) / 5.0 < 1e-3


def test_bundle_counts():
    frames = [Frame(k / 10, []) for k in range(11)]
    out = bundle(frames, imu_stream(100, 1.0), wheel_stream(100, 1.0), 0.01, 0.01)
    assert len(out) == 11
    assert out[0].imu == [] and out[0].wheel == []
    for b in out[1:]:
        assert len(b.imu) == 10
        assert len(b.wheel) == 10
        assert b.features == []


def test_bundle_tiling_without_duplicates():
    imu = imu_stream(200, 1.0)
    frames = [Frame(t, []) for t in (0.0, 0.25, 0.5, 0.73, 1.0)]
    out = bundle(frames, imu, wheel_stream(100, 1.0))
    seen = [s.t for b in out for s in b.imu]
    assert seen == sorted(seen)
    # each original sample time appears at most once; interpolated closers are extra
    orig = [s.t for s in imu]
    for t in orig[1:]:
        assert seen.count(t) == 1
    for b in out[1:]:
        assert abs(b.imu[-1].t - b.frame_t) < 1e-12
        assert abs(b.wheel[0].t0 - b.prev_t) < 1e-12 and abs(b.wheel[-1].t1 - b.frame_t) < 1e-12


def test_bundle_missing_coverage():
    frames = [Frame(0.0, []), Frame(2.0, [])]
    with pytest.raises(GapError):
        bundle(frames, imu_stream(200, 1.0), wheel_stream(100, 1.0))


def test_fill_frame_gaps():
    frames = [Frame(0.0, [(1, 2.0, 3.0)]), Frame(0.5, [])]
    out = fill_frame_gaps(frames, 10.0)
    assert [round(f.t, 9) for f in out] == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
