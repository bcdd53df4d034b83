import filecmp
import subprocess
import sys

import numpy as np
import pytest

from viwo import dataset
from viwo.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from viwo.wheel_odom import dead_reckon


def write_cfg(path, **kv):
    kv.setdefault("mode", "fused")
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
    return str(path)


def final_error(traj_path, data_dir):
    t, p, _ = dataset.read_trajectory(traj_path)
    tg, pg, _ = dataset.read_poses(data_dir / "groundtruth.csv")
    j = int(np.argmin(np.abs(tg - t[-1])))
    return float(np.linalg.norm(p[-1] - pg[j]))


def test_static_simulate_row_counts(tmp_path):
    cfg = write_cfg(tmp_path / "s.cfg", trajectory="static", duration=10)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_OK
    count = {k: len((tmp_path / "d" / f).read_text().splitlines()) - 1 for k, f in dataset.FILES.items()}
    assert count["imu"] == 200 * 10 + 1
    assert count["wheel"] == 100 * 10 + 1
    assert count["groundtruth"] == 200 * 10 + 1
    _, _, frames = dataset.read_dataset(tmp_path / "d")
    assert len(frames) == 10 * 10 + 1


def test_same_seed_identical_files(tmp_path):
    cfg = write_cfg(tmp_path / "s.cfg", duration=3, pixel_noise=1.0, imu_noise="yes", wheel_noise="yes")
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / name), "--seed", "11"]) == 0
    for f in dataset.FILES.values():
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "12"]) == 0
    assert not filecmp.cmp(tmp_path / "a" / "imu.csv", tmp_path / "c" / "imu.csv", shallow=False)


def test_invalid_key_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.cfg", frobnicate=1)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert "frobnicate" in capsys.readouterr().err


def test_missing_dataset_exit_code(tmp_path, capsys):
    assert main(["run", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "t.txt")]) == EXIT_DATA
    assert "none" in capsys.readouterr().err


def test_eval_groundtruth_against_itself(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "s.cfg", duration=5)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")])
    t, p, q = dataset.read_poses(tmp_path / "d" / "groundtruth.csv")
    from viwo.state import KeyframeState
    dataset.write_trajectory(tmp_path / "gt.txt", [(ti, KeyframeState(pi, q=qi)) for ti, pi, qi in zip(t, p, q)])
    capsys.readouterr()
    assert main(["eval", "--traj", str(tmp_path / "gt.txt"), "--dataset", str(tmp_path / "d"),
                 "--out", str(tmp_path / "r.txt")]) == 0
    out = capsys.readouterr().out
    fields = dict(line.split(" = ") for line in out.splitlines() if " = " in line)
    for key in ("x_err", "y_err", "position_error", "heading_error", "ate_rmse"):
        assert float(fields[key]) == 0.0
    assert (tmp_path / "r.txt").read_text() == out


def test_eval_without_overlap(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "s.cfg", duration=2)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")])
    (tmp_path / "late.txt").write_text("50 0 0 0 0 0 0 1\n")
    assert main(["eval", "--traj", str(tmp_path / "late.txt"), "--dataset", str(tmp_path / "d")]) == EXIT_DATA
    assert "overlap" in capsys.readouterr().err


@pytest.fixture(scope="module")
def circle_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("circle")
    cfg = write_cfg(root / "c.cfg", duration=20)
    assert main(["simulate", "--config", cfg, "--out", str(root / "d")]) == 0
    return root, cfg


def test_run_noise_free_circle(circle_dataset):
    root, cfg = circle_dataset
    assert main(["run", "--config", cfg, "--dataset", str(root / "d"), "--out", str(root / "fused.txt")]) == 0
    assert final_error(root / "fused.txt", root / "d") < 1e-2


def test_wheel_odom_mode_is_dead_reckoning(circle_dataset):
    root, cfg = circle_dataset
    out = root / "wo.txt"
    assert main(["run", "--config", cfg, "--dataset", str(root / "d"), "--out", str(out), "--mode", "wheel-odom"]) == 0
    wheel = dataset.read_wheel(root / "d" / "wheel.csv")
    states = dead_reckon(wheel)
    t, p, q = dataset.read_trajectory(out)
    assert np.array_equal(t, [w.t for w in wheel])
    assert np.allclose(p[:, 0], [s.px for s in states], rtol=1e-8, atol=1e-8)
    assert np.allclose(p[:, 1], [s.py for s in states], rtol=1e-8, atol=1e-8)
    assert not p[:, 2].any()


def test_dropout_fused_beats_visual_inertial(tmp_path):
    cfg = write_cfg(tmp_path / "drop.cfg", duration=20, vision_dropout="5:15", pixel_noise=1.0,
                    imu_noise="yes", wheel_noise="yes", bias_a="0.05 -0.03 0.02", bias_g="0.005 -0.003 0.004",
                    seed=1)
    d = tmp_path / "d"
    assert main(["simulate", "--config", cfg, "--out", str(d)]) == 0
    errs = {}
    for mode in ("fused", "visual-inertial"):
        out = tmp_path / f"{mode}.txt"
        assert main(["run", "--config", cfg, "--dataset", str(d), "--out", str(out), "--mode", mode]) in (0, 4)
        errs[mode] = final_error(out, d)
    assert errs["fused"] < errs["visual-inertial"]


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "viwo", "eval", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--traj" in r.stdout


def test_wheel_odom_run_bit_identical():
    from viwo.estimator import EstimatorConfig
    from viwo.runner import run
    from viwo.simulator import TrajectorySpec, synthesize
    sim = synthesize(TrajectorySpec(duration=5.0))
    traj, est = run(sim.imu, sim.wheel, sim.frames, EstimatorConfig(mode="wheel-odom"))
    states = dead_reckon(sim.wheel)
    assert est is None
    assert [(x.p[0], x.p[1]) for _, x in traj] == [(s.px, s.py) for s in states]
