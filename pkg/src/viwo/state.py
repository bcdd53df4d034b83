from dataclasses import dataclass, field

import numpy as np

from .rotmath import batch_quat_exp, batch_quat_mul, batch_rot_from_quat, identity_quat, quat_from_small_angle, quat_mul, rot_from_quat


def _vec(v):
    return np.array(v, dtype=float).reshape(3)


@dataclass(eq=False)
class KeyframeState:
    """Navigation state of the IMU body at one keyframe.

    ``q`` rotates body vectors into the world frame. Error-state ordering used
    everywhere is ``[dp, dv, dtheta, dba, dbg]`` (15 entries).
    """

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=identity_quat)
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        self.p, self.v, self.ba, self.bg = _vec(self.p), _vec(self.v), _vec(self.ba), _vec(self.bg)
        self.q = np.array(self.q, dtype=float).reshape(4)

    @property
    def R(self):
        return rot_from_quat(self.q)

    def copy(self):
        return KeyframeState(self.p.copy(), self.v.copy(), self.q.copy(), self.ba.copy(), self.bg.copy(), self.t)

    def retract(self, dx):
        """Apply a 15-vector error-state increment."""
        return KeyframeState(
            self.p + dx[0:3],
            self.v + dx[3:6],
            quat_mul(self.q, quat_from_small_angle(dx[6:9])),
            self.ba + dx[9:12],
            self.bg + dx[12:15],
            self.t,
        )

    def is_diverged(self, max_ba=1.0, max_bg=0.2):
        finite = all(np.all(np.isfinite(a)) for a in (self.p, self.v, self.q, self.ba, self.bg))
        return not finite or np.linalg.norm(self.ba) >= max_ba or np.linalg.norm(self.bg) >= max_bg


class StateArrays:
    """Window states stored as stacked arrays for vectorized evaluation."""

    def __init__(self, p, v, q, ba, bg, t):
        self.p, self.v, self.q, self.ba, self.bg = p, v, q, ba, bg
        self.t = list(t)
        self._R = None

    @classmethod
    def from_states(cls, states):
        return cls(*(np.array([getattr(x, k) for x in states], dtype=float) for k in ("p", "v", "q", "ba", "bg")),
                   [x.t for x in states])

    def __len__(self):
        return len(self.t)

    @property
    def R(self):
        if self._R is None:
            self._R = batch_rot_from_quat(self.q)
        return self._R

    def retract(self, dx):
        d = np.asarray(dx, dtype=float).reshape(len(self), 15)
        return StateArrays(self.p + d[:, 0:3], self.v + d[:, 3:6],
                           batch_quat_mul(self.q, batch_quat_exp(d[:, 6:9])),
                           self.ba + d[:, 9:12], self.bg + d[:, 12:15], self.t)

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return StateArrays(self.p[idx], self.v[idx], self.q[idx], self.ba[idx], self.bg[idx],
                           [self.t[i] for i in idx])

    def states(self):
        return [KeyframeState(self.p[k], self.v[k], self.q[k], self.ba[k], self.bg[k], self.t[k])
                for k in range(len(self))]

    def is_diverged(self, max_ba=1.0, max_bg=0.2):
        finite = all(np.all(np.isfinite(a)) for a in (self.p, self.v, self.q, self.ba, self.bg))
        return (not finite or np.any(np.linalg.norm(self.ba, axis=1) >= max_ba)
                or np.any(np.linalg.norm(self.bg, axis=1) >= max_bg))


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Sensor mounting relative to the IMU body frame."""

    R_cam_in_body: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_cam_in_body: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R_odom_in_body: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_odom_in_body: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("R_cam_in_body", "R_odom_in_body"):
            R = np.array(getattr(self, name), dtype=float).reshape(3, 3)
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
                raise ValueError(f"{name} is not a proper rotation")
            object.__setattr__(self, name, R)
        for name in ("p_cam_in_body", "p_odom_in_body"):
            object.__setattr__(self, name, _vec(getattr(self, name)))


# camera looking along body +x, image x to body -y, image y to body -z
FORWARD_CAMERA = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def default_extrinsics():
    return Extrinsics(
        R_cam_in_body=FORWARD_CAMERA,
        p_cam_in_body=np.array([0.1, 0.0, 0.2]),
        R_odom_in_body=np.eye(3),
        p_odom_in_body=np.array([0.0, 0.0, -0.1]),
    )
