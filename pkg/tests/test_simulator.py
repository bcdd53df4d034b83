import math

import numpy as np
import pytest
from helpers import residual_extremes

from viwo.pipeline import prefuse
from viwo.rotmath import rot_from_quat
from viwo.simulator import (
    KINDS,
    FaultSpec,
    SimNoise,
    TrajectorySpec,
    ground_truth,
    sample_times,
    synthesize,
)
from viwo.wheel_odom import dead_reckon

SPECS = [
    TrajectorySpec("circle", duration=60.0),
    TrajectorySpec("figure-eight", duration=60.0, z_undulation_amp=0.02),
    TrajectorySpec("corridor-loop", duration=60.0, speed=0.8, z_undulation_amp=0.03, z_undulation_period=2.0),
]


def test_static_ground_truth():
    spec = TrajectorySpec("static", duration=5.0)
    g0 = ground_truth(spec, 0.0)
    for t in (1.0, 2.5, 5.0):
        g = ground_truth(spec, t)
        assert np.array_equal(g.p, g0.p) and np.array_equal(g.q, g0.q)
        assert not g.v.any() and not g.a.any() and not g.omega.any()


@pytest.mark.parametrize("speed, radius", [(0.5, 3.0), (1.2, 2.0), (0.3, 10.0)])
def test_circle_centripetal(speed, radius):
    spec = TrajectorySpec("circle", speed=speed, size=radius)
    for t in np.linspace(0, 60, 7):
        g = ground_truth(spec, t)
        assert np.linalg.norm(g.a) == pytest.approx(speed ** 2 / radius, rel=1e-12)
        assert np.linalg.norm(g.v) == pytest.approx(speed, rel=1e-12)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_derivatives_match_finite_differences(spec):
    h = 1e-5
    for t in np.linspace(1.0, 59.0, 9):
        gm, g, gp = (ground_truth(spec, t + d) for d in (-h, 0.0, h))
        assert np.abs((gp.p - gm.p) / (2 * h) - g.v).max() < 1e-6
        assert np.abs((gp.v - gm.v) / (2 * h) - g.a).max() < 1e-6
        dyaw = math.remainder(gp.yaw - gm.yaw, 2 * math.pi) / (2 * h)
        assert abs(dyaw - g.omega[2]) < 1e-6


def test_rejects_out_of_range_time():
    spec = TrajectorySpec(duration=10.0)
    with pytest.raises(ValueError):
        ground_truth(spec, 10.5)
    with pytest.raises(ValueError):
        ground_truth(spec, -0.1)


@pytest.mark.parametrize("kw", [dict(kind="spiral"), dict(duration=0.0), dict(speed=-1.0)])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        TrajectorySpec(**kw)


def test_sample_times_count():
    assert len(sample_times(200.0, 10.0)) == 2001
    assert KINDS == ("circle", "figure-eight", "corridor-loop", "static")


def test_static_scene_measurements():
    sim = synthesize(TrajectorySpec("static", duration=2.0))
    acc = np.array([s.accel for s in sim.imu])
    assert np.allclose(acc, [0.0, 0.0, 9.81], atol=1e-12)
    assert not np.array([s.gyro for s in sim.imu]).any()
    assert all(w.vx == 0 and w.vy == 0 and w.omega == 0 for w in sim.wheel)
    first = sim.frames[0].features
    assert first and all(f.features == first for f in sim.frames)


def test_deterministic_per_seed():
    spec = TrajectorySpec(duration=5.0)
    noise = SimNoise(pixel=1.0, imu_noise=True, wheel_noise=True)
    a = synthesize(spec, noise=noise, seed=7)
    b = synthesize(spec, noise=noise, seed=7)
    c = synthesize(spec, noise=noise, seed=8)
    assert all(np.array_equal(x.accel, y.accel) and np.array_equal(x.gyro, y.gyro) for x, y in zip(a.imu, b.imu))
    def rows(sim):
        return [(w.t, w.vx, w.vy, w.omega) for w in sim.wheel]
    assert rows(a) == rows(b) and [f.features for f in a.frames] == [f.features for f in b.frames]
    assert rows(a) != rows(c)


def test_injected_biases():
    spec = TrajectorySpec("static", duration=1.0)
    sim = synthesize(spec, FaultSpec(imu_bias_a=(0.1, 0.0, -0.2), imu_bias_g=(0.01, 0.02, 0.03)))
    assert np.allclose(sim.imu[5].accel, [0.1, 0.0, 9.61])
    assert np.allclose(sim.imu[5].gyro, [0.01, 0.02, 0.03])


def test_features_visible_and_exact():
    sim = synthesize(TrajectorySpec("figure-eight", duration=10.0), seed=3)
    cam, ex = sim.cam, sim.extr
    for fr in sim.frames[::5]:
        g = ground_truth(TrajectorySpec("figure-eight", duration=10.0), fr.t)
        Pc = ((sim.landmarks - g.p) @ rot_from_quat(g.q) - ex.p_cam_in_body) @ ex.R_cam_in_body
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack((cam.fx * Pc[:, 0] / Pc[:, 2] + cam.cx, cam.fy * Pc[:, 1] / Pc[:, 2] + cam.cy), axis=1)
        for _, u, v in fr.features:
            assert cam.in_image(u, v)
            d = np.linalg.norm(uv - [u, v], axis=1)
            j = int(np.nanargmin(np.where(Pc[:, 2] > 0, d, np.nan)))
            assert d[j] < 1e-9 and Pc[j, 2] > 0


def test_vision_dropout_and_new_ids():
    sim = synthesize(TrajectorySpec(duration=10.0), FaultSpec(vision_dropout=((3.0, 5.0),)))
    before = {fid for fr in sim.frames if fr.t < 3.0 for fid, _, _ in fr.features}
    after = {fid for fr in sim.frames if fr.t > 5.0 for fid, _, _ in fr.features}
    assert all(not fr.features for fr in sim.frames if 3.0 <= fr.t <= 5.0)
    assert before and after and not before & after


def path_length(xy):
    return float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1)))


def test_slip_overshoots_path_length():
    spec = TrajectorySpec(duration=20.0)
    sim = synthesize(spec, FaultSpec(slip_windows=((5.0, 15.0, 1.3),)))
    states = dead_reckon(sim.wheel)
    inside = [k for k, w in enumerate(sim.wheel) if 5.0 < w.t <= 15.0]
    dr = np.array([[states[k].px, states[k].py] for k in [inside[0] - 1] + inside])
    gt = np.array([ground_truth(spec, sim.wheel[k].t).p[:2] for k in [inside[0] - 1] + inside])
    assert path_length(dr) / path_length(gt) == pytest.approx(1.3, rel=1e-3)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_noise_free_residuals_vanish(spec):
    assert max(residual_extremes(spec)) <= 1e-6


def test_prefuse_uses_simulated_streams():
    sim = synthesize(TrajectorySpec(duration=2.0))
    meas = prefuse(sim.wheel, sim.imu, (0.5, 1.0))
    assert len(meas) == 50 and meas[0].t0 == pytest.approx(0.5)
