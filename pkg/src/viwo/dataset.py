"""CSV dataset files and trajectory files.

Dataset files are comma-separated with a mandatory header and timestamps in
seconds. Camera frames without features are kept as a single marker row with
``feature_id = -1`` so that every frame time survives the round trip.
Quaternions on disk are ``qx qy qz qw``; in memory they are ``[w, x, y, z]``.
"""

import csv
import math
import os

import numpy as np

from .errors import DataError
from .pipeline import Frame, ImuSample, WheelSample

IMU_HEADER = ("t", "ax", "ay", "az", "gx", "gy", "gz")
WHEEL_HEADER = ("t", "vx", "vy", "omega")
FEATURE_HEADER = ("t", "feature_id", "u", "v")
GT_HEADER = ("t", "px", "py", "pz", "qx", "qy", "qz", "qw")
FILES = {"imu": "imu.csv", "wheel": "wheel.csv", "features": "features.csv", "groundtruth": "groundtruth.csv"}
NO_FEATURE = -1


def _write_csv(path, header, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from None


def _num(x):
    return repr(float(x))


def _wxyz_to_xyzw(q):
    return (q[1], q[2], q[3], q[0])


def write_dataset(sim, out_dir):
    """Write ``sim`` (a ``SimData``) as the four dataset CSV files."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in FILES.items()}
    _write_csv(paths["imu"], IMU_HEADER,
               ([_num(s.t), *map(_num, s.accel), *map(_num, s.gyro)] for s in sim.imu))
    _write_csv(paths["wheel"], WHEEL_HEADER,
               ([_num(s.t), _num(s.vx), _num(s.vy), _num(s.omega)] for s in sim.wheel))

    def feature_rows():
        for f in sim.frames:
            if not f.features:
                yield [_num(f.t), str(NO_FEATURE), "nan", "nan"]
            for fid, u, v in f.features:
                yield [_num(f.t), str(int(fid)), _num(u), _num(v)]

    _write_csv(paths["features"], FEATURE_HEADER, feature_rows())
    _write_csv(paths["groundtruth"], GT_HEADER,
               ([_num(t), *map(_num, p), *map(_num, _wxyz_to_xyzw(q))]
                for t, p, q in zip(sim.gt_t, sim.gt_p, sim.gt_q)))
    return paths


def _read_csv(path, header, allow_nan=()):
    """Rows of floats; checks header, column count, finiteness and time order."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(c.strip() for c in first) != header:
            raise DataError(f"{path}: header must be {','.join(header)}")
        rows = []
        last_t = -math.inf
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            for name, x in zip(header, vals):
                if not math.isfinite(x) and name not in allow_nan:
                    raise DataError(f"{path}:{lineno}: non-finite {name}")
            if vals[0] < last_t:
                raise DataError(f"{path}:{lineno}: timestamps go backwards")
            last_t = vals[0]
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return rows


def read_imu(path):
    return [ImuSample(r[0], r[1:4], r[4:7]) for r in _read_csv(path, IMU_HEADER)]


def read_wheel(path):
    return [WheelSample(r[0], r[1], r[2], r[3]) for r in _read_csv(path, WHEEL_HEADER)]


def read_features(path):
    """Frames in time order; marker rows yield frames without features."""
    frames = []
    for lineno, r in enumerate(_read_csv(path, FEATURE_HEADER, allow_nan=("u", "v")), 2):
        t, fid = r[0], r[1]
        if not frames or frames[-1].t != t:
            frames.append(Frame(t, []))
        if fid == NO_FEATURE:
            continue
        if fid < 0 or fid != int(fid) or not (math.isfinite(r[2]) and math.isfinite(r[3])):
            raise DataError(f"{path}:{lineno}: invalid feature row")
        frames[-1].features.append((int(fid), r[2], r[3]))
    return frames


def read_poses(path, header=GT_HEADER):
    """``(t, p, q)`` arrays with ``q`` as ``[w, x, y, z]``."""
    a = np.array(_read_csv(path, header), dtype=float)
    q = a[:, [7, 4, 5, 6]]
    n = np.linalg.norm(q, axis=1)
    if np.any(np.abs(n - 1.0) > 1e-3):
        raise DataError(f"{path}: quaternions are not unit length")
    return a[:, 0], a[:, 1:4], q / n[:, None]


def read_dataset(data_dir):
    """``(imu, wheel, frames)`` from a dataset directory."""
    p = {k: os.path.join(data_dir, v) for k, v in FILES.items()}
    for k in ("imu", "wheel", "features"):
        if not os.path.isfile(p[k]):
            raise DataError(f"missing dataset file {p[k]}")
    return read_imu(p["imu"]), read_wheel(p["wheel"]), read_features(p["features"])


def write_trajectory(path, traj):
    """One ``t px py pz qx qy qz qw`` line per ``(t, state)``, 9 significant digits."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for t, x in traj:
                vals = (t, *x.p, *_wxyz_to_xyzw(x.q))
                fh.write(" ".join(f"{v:.9g}" for v in vals) + "\n")
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from None


def read_trajectory(path):
    """``(t, p, q)`` from a trajectory file (``q`` as ``[w, x, y, z]``)."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
        try:
            rows.append([float(s) for s in parts])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: empty trajectory")
    a = np.array(rows)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{path}: non-finite values")
    q = a[:, [7, 4, 5, 6]]
    return a[:, 0], a[:, 1:4], q / np.linalg.norm(q, axis=1)[:, None]
