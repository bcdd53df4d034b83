"""Command-line entry point: ``viwo simulate|run|eval``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

import argparse
import os
import sys
import time

from . import dataset
from .config import defaults, load_config
from .errors import ConfigError, DataError, DivergenceError, ViwoError
from .estimator import MODES
from .evaluation import drift_report
from .runner import run
from .simulator import synthesize

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _config(args):
    cfg = load_config(args.config) if args.config else defaults()
    return cfg.with_overrides(mode=getattr(args, "mode", None), seed=getattr(args, "seed", None))


def cmd_simulate(cfg, out_dir):
    """Synthesize a dataset; returns the written file paths."""
    sim = synthesize(cfg.trajectory(), cfg.faults(), cam=cfg.camera(), extr=cfg.extrinsics(),
                     noise=cfg.sim_noise(), rates=cfg.rates(), seed=cfg["seed"],
                     max_features=cfg["max_features"], n_landmarks=cfg["n_landmarks"])
    if sim.n_behind:
        print(f"warning: {sim.n_behind} frames with every landmark behind the camera", file=sys.stderr)
    return dataset.write_dataset(sim, out_dir)


def cmd_run(cfg, dataset_dir, out_traj):
    """Run the estimator on a dataset and write the keyframe trajectory.

    On divergence the poses finalized so far are written before the error
    propagates.
    """
    imu, wheel, frames = dataset.read_dataset(dataset_dir)
    try:
        traj, _ = run(imu, wheel, frames, cfg.estimator(), camera_hz=cfg["camera_rate"])
    except DivergenceError as e:
        dataset.write_trajectory(out_traj, getattr(e, "trajectory", []))
        raise
    if not traj:
        raise DataError("estimator never initialized; dataset too short or without motion cues")
    dataset.write_trajectory(out_traj, traj)
    return traj


def cmd_eval(traj_path, groundtruth_path):
    t_e, p_e, q_e = dataset.read_trajectory(traj_path)
    t_g, p_g, q_g = dataset.read_poses(groundtruth_path)
    return drift_report(t_e, p_e, q_e, t_g, p_g, q_g)


def build_parser():
    ap = argparse.ArgumentParser(prog="viwo", description="Visual-inertial-wheel odometry toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a dataset")
    s.add_argument("--config", help="flat key = value config file")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, help="override the config seed")

    r = sub.add_parser("run", help="run the estimator on a dataset")
    r.add_argument("--config", help="flat key = value config file")
    r.add_argument("--dataset", required=True, help="dataset directory")
    r.add_argument("--out", required=True, help="output trajectory file")
    r.add_argument("--mode", choices=MODES, help="override the config mode")

    e = sub.add_parser("eval", help="drift report of a trajectory against ground truth")
    e.add_argument("--traj", required=True, help="trajectory file")
    e.add_argument("--dataset", required=True, help="dataset directory holding groundtruth.csv")
    e.add_argument("--out", help="also write the report to this file")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            paths = cmd_simulate(_config(args), args.out)
            for p in paths.values():
                print(p)
        elif args.command == "run":
            cfg = _config(args)
            t0 = time.perf_counter()
            traj = cmd_run(cfg, args.dataset, args.out)
            print(f"{len(traj)} poses written to {args.out} in {time.perf_counter() - t0:.2f} s")
        else:
            gt = os.path.join(args.dataset, dataset.FILES["groundtruth"])
            text = cmd_eval(args.traj, gt).format()
            sys.stdout.write(text)
            if args.out:
                with open(args.out, "w", encoding="utf-8") as fh:
                    fh.write(text)
    except ConfigError as e:
        print(f"viwo: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"viwo: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"viwo: estimator diverged: {e}; partial trajectory written to {args.out}", file=sys.stderr)
        return EXIT_DIVERGED
    except ViwoError as e:
        print(f"viwo: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"viwo: I/O error: {e}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
