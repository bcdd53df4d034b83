"""Flat ``key = value`` run configuration.

One file drives both the simulator and the estimator. Blank lines and text
after ``#`` are ignored. Vectors are whitespace- or comma-separated numbers;
fault windows are ``t0:t1`` or ``t0:t1:factor`` items separated by commas.
Unknown keys are rejected and every key in ``REQUIRED`` must be present.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .estimator import MODES, EstimatorConfig
from .imu_preint import NoiseParams
from .rotmath import quat_from_rot, rot_from_quat
from .simulator import KINDS, FaultSpec, Rates, SimNoise, TrajectorySpec
from .state import Extrinsics, default_extrinsics
from .vision import CameraModel

REQUIRED = ("mode",)


def _float(s):
    return float(s)


def _int(s):
    return int(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _vec(n):
    def parse(s):
        parts = s.replace(",", " ").split()
        if len(parts) != n:
            raise ValueError(f"expected {n} numbers, got {len(parts)}")
        return tuple(float(p) for p in parts)
    return parse


def _windows(arity):
    def parse(s):
        out = []
        for item in filter(None, (p.strip() for p in s.split(","))):
            vals = tuple(float(x) for x in item.split(":"))
            if len(vals) != arity:
                raise ValueError(f"window {item!r} needs {arity} ':'-separated numbers")
            out.append(vals)
        return tuple(out)
    return parse


def _choice(options):
    def parse(s):
        v = s.strip()
        if v not in options:
            raise ValueError(f"{v!r} is not one of {', '.join(options)}")
        return v
    return parse


_default_extr = default_extrinsics()
_default_noise = NoiseParams()
_default_est = EstimatorConfig()
_default_cam = CameraModel()
_default_traj = TrajectorySpec()
_default_rates = Rates()

# key -> (parser, default)
SCHEMA = {
    # estimator
    "mode": (_choice(MODES), None),
    "window_size": (_int, _default_est.window_size),
    "max_iterations": (_int, _default_est.max_iterations),
    "sigma_px": (_float, _default_est.sigma_px),
    "kf_parallax_px": (_float, _default_est.kf_parallax_px),
    "kf_min_tracked": (_int, _default_est.kf_min_tracked),
    "kf_max_interval": (_float, _default_est.kf_max_interval),
    "kf_blind_interval": (_float, _default_est.kf_blind_interval),
    "init_interval": (_float, _default_est.init_interval),
    # noise model (shared by estimator and simulator)
    "sigma_a": (_float, _default_noise.sigma_a),
    "sigma_g": (_float, _default_noise.sigma_g),
    "sigma_ba": (_float, _default_noise.sigma_ba),
    "sigma_bg": (_float, _default_noise.sigma_bg),
    "sigma_wheel": (_vec(3), tuple(_default_noise.sigma_wheel)),
    # extrinsics, quaternions as w x y z
    "q_cam_in_body": (_vec(4), tuple(quat_from_rot(_default_extr.R_cam_in_body))),
    "p_cam_in_body": (_vec(3), tuple(_default_extr.p_cam_in_body)),
    "q_odom_in_body": (_vec(4), tuple(quat_from_rot(_default_extr.R_odom_in_body))),
    "p_odom_in_body": (_vec(3), tuple(_default_extr.p_odom_in_body)),
    # pinhole camera
    "fx": (_float, _default_cam.fx),
    "fy": (_float, _default_cam.fy),
    "cx": (_float, _default_cam.cx),
    "cy": (_float, _default_cam.cy),
    "width": (_int, _default_cam.width),
    "height": (_int, _default_cam.height),
    # simulation
    "trajectory": (_choice(KINDS), _default_traj.kind),
    "speed": (_float, _default_traj.speed),
    "duration": (_float, _default_traj.duration),
    "size": (_float, _default_traj.size),
    "z_undulation_amp": (_float, _default_traj.z_undulation_amp),
    "z_undulation_period": (_float, _default_traj.z_undulation_period),
    "yaw_follows_path": (_bool, _default_traj.yaw_follows_path),
    "imu_rate": (_float, _default_rates.imu),
    "wheel_rate": (_float, _default_rates.wheel),
    "camera_rate": (_float, _default_rates.camera),
    "pixel_noise": (_float, 0.0),
    "imu_noise": (_bool, False),
    "wheel_noise": (_bool, False),
    "bias_a": (_vec(3), (0.0, 0.0, 0.0)),
    "bias_g": (_vec(3), (0.0, 0.0, 0.0)),
    "slip_windows": (_windows(3), ()),
    "vision_dropout": (_windows(2), ()),
    "n_landmarks": (_int, 400),
    "max_features": (_int, 40),
    "seed": (_int, 0),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kw):
        vals = dict(self.values)
        for k, v in kw.items():
            if v is None:
                continue
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = v
        return RunConfig(vals)

    # builders --------------------------------------------------------------
    def noise(self):
        v = self.values
        return NoiseParams(v["sigma_a"], v["sigma_g"], v["sigma_ba"], v["sigma_bg"], tuple(v["sigma_wheel"]))

    def extrinsics(self):
        v = self.values
        return Extrinsics(
            R_cam_in_body=rot_from_quat(_unit(v["q_cam_in_body"], "q_cam_in_body")),
            p_cam_in_body=np.array(v["p_cam_in_body"]),
            R_odom_in_body=rot_from_quat(_unit(v["q_odom_in_body"], "q_odom_in_body")),
            p_odom_in_body=np.array(v["p_odom_in_body"]),
        )

    def camera(self):
        v = self.values
        return CameraModel(v["fx"], v["fy"], v["cx"], v["cy"], v["width"], v["height"])

    def estimator(self):
        v = self.values
        return EstimatorConfig(
            mode=v["mode"], window_size=v["window_size"], kf_parallax_px=v["kf_parallax_px"],
            kf_min_tracked=v["kf_min_tracked"], kf_max_interval=v["kf_max_interval"],
            kf_blind_interval=v["kf_blind_interval"], init_interval=v["init_interval"],
            max_iterations=v["max_iterations"], sigma_px=v["sigma_px"], noise=self.noise(),
            extr=self.extrinsics(), cam=self.camera(),
        )

    def trajectory(self):
        v = self.values
        return TrajectorySpec(v["trajectory"], v["speed"], v["duration"], v["size"],
                              v["z_undulation_amp"], v["z_undulation_period"], v["yaw_follows_path"])

    def faults(self):
        v = self.values
        dur = v["duration"]
        for t0, t1, k in v["slip_windows"]:
            if not (0.0 <= t0 <= t1 <= dur) or k < 0.0:
                raise ConfigError(f"slip window {t0}:{t1}:{k} outside [0, {dur}] or negative factor")
        for t0, t1 in v["vision_dropout"]:
            if not 0.0 <= t0 <= t1 <= dur:
                raise ConfigError(f"vision dropout {t0}:{t1} outside [0, {dur}]")
        return FaultSpec(v["slip_windows"], v["vision_dropout"], v["bias_a"], v["bias_g"])

    def sim_noise(self):
        v = self.values
        return SimNoise(self.noise(), v["pixel_noise"], v["imu_noise"], v["wheel_noise"])

    def rates(self):
        v = self.values
        return Rates(v["imu_rate"], v["wheel_rate"], v["camera_rate"])


def _unit(q, name):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not n > 0:
        raise ConfigError(f"{name} must be a nonzero quaternion")
    return q / n


def defaults(mode="fused"):
    vals = {k: d for k, (_, d) in SCHEMA.items()}
    vals["mode"] = mode
    return RunConfig(vals)


def parse_config(text, source="<config>"):
    """Parse config text; raises ``ConfigError`` naming the offending key."""
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in vals:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        try:
            vals[key] = SCHEMA[key][0](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    missing = [k for k in REQUIRED if k not in vals]
    if missing:
        raise ConfigError(f"{source}: missing required config key(s): {', '.join(missing)}")
    cfg = defaults()
    cfg.values.update(vals)
    _validate(cfg, source)
    return cfg


def _validate(cfg, source):
    builders = (cfg.noise, cfg.extrinsics, cfg.camera, cfg.estimator, cfg.trajectory, cfg.faults)
    for build in builders:
        try:
            build()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"{source}: {e}") from None
    v = cfg.values
    if min(v["imu_rate"], v["wheel_rate"], v["camera_rate"]) <= 0:
        raise ConfigError(f"{source}: sensor rates must be positive")


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))
