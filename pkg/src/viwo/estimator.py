"""Sliding-window estimator over IMU, wheel and visual factors.

Per-frame error state is ``[dp, dv, dtheta, dba, dbg]`` (15 entries); inverse
depths of active landmarks follow the frame block. Normal equations use
``H = sum J^T W J`` and ``b = -sum J^T W r``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import vision
from .errors import DataError, DivergenceError, FactorError, InitializationError, RepropagationRequired
from .imu_preint import GRAVITY, ImuFactorBatch, ImuPreintegration, NoiseParams
from .initializer import K_MIN, InitInterval, bootstrap
from .marginalization import MarginalPrior, marginalize, sqrt_factor
from .rotmath import quat_mul
from .state import KeyframeState, StateArrays, default_extrinsics
from .vision import CameraModel, FeatureTrack
from .wheel_odom import WheelFactorBatch, WheelPreintegration

__all__ = [
    "EstimatorConfig",
    "Estimator",
    "KeyframeState",
    "SlidingWindow",
    "WindowFrame",
    "build_normal_equations",
    "marginalize",
    "slide",
    "solve_window",
]

MODES = ("fused", "wheel-odom", "wheel-inertial", "visual-inertial")

# gauge prior on the first frame: position, velocity, roll/pitch, yaw, ba, bg
INIT_PRIOR_SIGMA = (1e-4, 1.0, 0.05, 1e-4, 0.1, 0.01)
REPROPAGATE_AT = 0.05
MIN_INV_DEPTH = 1e-4
MAX_INV_DEPTH = 10.0
MAX_DAMPING_STEPS = 16


@dataclass
class EstimatorConfig:
    mode: str = "fused"
    window_size: int = 10
    kf_parallax_px: float = 10.0
    kf_min_tracked: int = 20
    kf_max_interval: float = 2.0
    kf_blind_interval: float = 0.5
    init_interval: float = 0.3
    max_iterations: int = 10
    sigma_px: float = 1.5
    noise: NoiseParams = field(default_factory=NoiseParams)
    extr: object = field(default_factory=default_extrinsics)
    cam: CameraModel = field(default_factory=CameraModel)
    record_covariance: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")

    @property
    def use_vision(self):
        return self.mode in ("fused", "visual-inertial")

    @property
    def use_wheel(self):
        return self.mode in ("fused", "wheel-inertial")


@dataclass(eq=False)
class WindowFrame:
    id: int
    t: float
    state: KeyframeState
    keyframe: bool = True
    features: dict = field(default_factory=dict)  # feature id -> (u, v)


def predict(x, pre, gravity=GRAVITY):
    """Propagate ``x`` through a preintegration computed at ``x``'s biases."""
    dt = pre.dt_sum
    R = x.R
    return KeyframeState(
        x.p + x.v * dt - 0.5 * gravity * dt * dt + R @ pre.alpha,
        x.v - gravity * dt + R @ pre.beta,
        quat_mul(x.q, pre.q),
        x.ba.copy(),
        x.bg.copy(),
        x.t + dt,
    )


class _VisualBatch:
    """Static arrays for all active visual observations in one solve."""

    def __init__(self, window, tracks, exclude_frame=None):
        cam = window.config.cam
        index = window.frame_index()
        rows = []
        for l, tr in enumerate(tracks):
            h = index[tr.host]
            for fid, px in tr.obs.items():
                if fid == tr.host or fid == exclude_frame or fid not in index:
                    continue
                rows.append((l, h, index[fid], tr.obs[tr.host], px))
        self.n = len(rows)
        if not rows:
            return
        self.lm = np.array([r[0] for r in rows])
        self.host = np.array([r[1] for r in rows])
        self.target = np.array([r[2] for r in rows])
        hp = np.array([r[3] for r in rows], dtype=float)
        op = np.array([r[4] for r in rows], dtype=float)
        self.f_host = np.column_stack(((hp[:, 0] - cam.cx) / cam.fx, (hp[:, 1] - cam.cy) / cam.fy, np.ones(self.n)))
        n_obs = np.column_stack(((op[:, 0] - cam.cx) / cam.fx, (op[:, 1] - cam.cy) / cam.fy, np.ones(self.n)))
        self.n_obs = n_obs / np.linalg.norm(n_obs, axis=1, keepdims=True)
        self.basis = vision.batch_tangent_basis(self.n_obs)
        self.scale = vision.visual_sqrt_info(cam, window.config.sigma_px)

    def evaluate(self, R, p, lam, extr, jacobian=True):
        r, J, valid = vision.batch_visual(
            self.f_host, self.basis, self.n_obs, lam[self.lm],
            R[self.host], p[self.host], R[self.target], p[self.target], extr, jacobian)
        r = r * self.scale
        if J is not None:
            J = J * self.scale
        return r, J, valid


@dataclass(eq=False)
class _Factors:
    imu: ImuFactorBatch
    wheel: object = None


def _huber_weight(s):
    return np.where(s <= 1.0, 1.0, 1.0 / np.sqrt(np.maximum(s, 1.0)))


def _huber_cost(s):
    return np.where(s <= 1.0, s, 2.0 * np.sqrt(np.maximum(s, 1.0)) - 1.0)


def _scatter_chain(H, b, J, r, w):
    """Add factors ``k`` spanning frames ``k`` and ``k + 1`` (J is N x m x 30)."""
    blocks = w[:, None, None] * np.einsum("nki,nkj->nij", J, J)
    grads = w[:, None] * np.einsum("nki,nk->ni", J, r)
    for k in range(len(r)):
        s = slice(15 * k, 15 * k + 30)
        H[s, s] += blocks[k]
        b[s] -= grads[k]


class SlidingWindow:
    def __init__(self, config=None):
        self.config = config or EstimatorConfig()
        self.frames = []
        self.imu = []
        self.wheel = []
        self.tracks = {}
        self.prior = None
        self.next_frame_id = 0
        self.emitted = []
        self.cost_trace = []
        self.last_H = None

    # bookkeeping ---------------------------------------------------------
    def frame_index(self):
        return {f.id: k for k, f in enumerate(self.frames)}

    def states_by_id(self):
        return {f.id: f.state for f in self.frames}

    def keyframe_count(self):
        return sum(1 for f in self.frames if f.keyframe)

    def last_keyframe(self):
        for f in reversed(self.frames):
            if f.keyframe:
                return f
        return None

    def new_frame(self, t, state, keyframe=True):
        f = WindowFrame(self.next_frame_id, float(t), state, keyframe)
        self.next_frame_id += 1
        self.frames.append(f)
        return f

    def add_observations(self, frame, features):
        for fid, u, v in features:
            fid = int(fid)
            tr = self.tracks.get(fid)
            if tr is None:
                tr = FeatureTrack(fid, frame.id, 1.0 / vision.FALLBACK_DEPTH, {})
                tr.triangulated = False
                self.tracks[fid] = tr
            tr.obs[frame.id] = (float(u), float(v))
            frame.features[fid] = tr.obs[frame.id]

    def active_tracks(self):
        index = self.frame_index()
        out = []
        for tr in self.tracks.values():
            if tr.host in index and sum(1 for k in tr.obs if k in index) >= 2:
                out.append(tr)
        out.sort(key=lambda tr: tr.id)
        return out

    def triangulate_new(self):
        states = self.states_by_id()
        for tr in self.active_tracks():
            if not getattr(tr, "triangulated", True):
                tr.inv_depth = vision.triangulate_inv_depth(tr, states, self.config.extr, self.config.cam)
                # low-parallax tracks are retried as the baseline grows
                tr.triangulated = tr.inv_depth != 1.0 / vision.FALLBACK_DEPTH

    def is_keyframe(self, frame):
        cfg = self.config
        last = self.last_keyframe()
        if last is None:
            return True
        if frame.t - last.t >= cfg.kf_max_interval - 1e-9:
            return True
        if not cfg.use_vision or (not frame.features and not last.features):
            return frame.t - last.t >= cfg.kf_blind_interval - 1e-9
        common = [fid for fid in last.features if fid in frame.features]
        if len(common) < cfg.kf_min_tracked:
            return True
        par = np.mean([math.hypot(frame.features[fid][0] - last.features[fid][0],
                                  frame.features[fid][1] - last.features[fid][1]) for fid in common])
        return par > cfg.kf_parallax_px

    # factors -------------------------------------------------------------
    def factors(self, first_only=False):
        """Stacked IMU and wheel factors (all intervals, or only the oldest)."""
        cfg = self.config
        imu = self.imu[:1] if first_only else self.imu
        wheel = self.wheel[:1] if first_only else self.wheel
        return _Factors(ImuFactorBatch(imu), WheelFactorBatch(wheel, cfg.extr) if cfg.use_wheel else None)

    def _prior_states(self, S):
        index = self.frame_index()
        return [index[i] for i in self.prior.frame_ids]

    def evaluate_cost(self, S=None, lam=None, batch=None, factors=None, parts=False):
        cfg = self.config
        S = StateArrays.from_states([f.state for f in self.frames]) if S is None else S
        factors = factors or self.factors()
        costs = {"prior": 0.0, "visual": 0.0, "imu": 0.0, "wheel": 0.0}
        if self.prior is not None:
            r, _ = self.prior.evaluate(S.take(self._prior_states(S)), jacobian=False)
            costs["prior"] = float(r @ r)
        if factors.imu.n:
            r, _ = factors.imu.evaluate(S.p, S.v, S.q, S.ba, S.bg, jacobian=False)
            costs["imu"] = float(np.sum(r * r))
        if factors.wheel is not None and factors.wheel.n:
            r, _ = factors.wheel.evaluate(S.p, S.q, S.bg, jacobian=False)
            costs["wheel"] = float(np.sum(_huber_cost(np.sum(r * r, axis=1))))
        if cfg.use_vision and batch is not None and batch.n:
            r, _, valid = batch.evaluate(S.R, S.p, lam, cfg.extr, jacobian=False)
            costs["visual"] = float(np.sum(_huber_cost(np.sum(r * r, axis=1)[valid])))
        total = sum(costs.values())
        return (total, costs) if parts else total

    def assemble(self, S, lam, batch, factors=None, use_prior=True):
        """Dense normal equations over all frames and the landmarks in ``lam``."""
        cfg = self.config
        factors = factors or self.factors()
        nF = len(S)
        dim = 15 * nF + len(lam)
        H = np.zeros((dim, dim))
        b = np.zeros(dim)
        if use_prior and self.prior is not None:
            idx = self._prior_states(S)
            r, J = self.prior.evaluate(S.take(idx))
            cols = (15 * np.asarray(idx)[:, None] + np.arange(15)).ravel()
            H[np.ix_(cols, cols)] += J.T @ J
            b[cols] -= J.T @ r
        if factors.imu.n:
            r, J = factors.imu.evaluate(S.p, S.v, S.q, S.ba, S.bg)
            if not np.all(np.isfinite(r)):
                raise FactorError("imu")
            _scatter_chain(H, b, J, r, np.ones(factors.imu.n))
        if factors.wheel is not None and factors.wheel.n:
            r, J = factors.wheel.evaluate(S.p, S.q, S.bg)
            if not np.all(np.isfinite(r)):
                raise FactorError("wheel")
            _scatter_chain(H, b, J, r, _huber_weight(np.sum(r * r, axis=1)))
        if cfg.use_vision and batch is not None and batch.n:
            r, J, valid = batch.evaluate(S.R, S.p, lam, cfg.extr)
            if not np.all(np.isfinite(r[valid])):
                raise FactorError("visual")
            w = _huber_weight(np.sum(r * r, axis=1)) * valid
            r = np.where(valid[:, None], r, 0.0)
            J = np.where(valid[:, None, None], J, 0.0)
            off = np.array([0, 1, 2, 6, 7, 8])
            cols = np.concatenate((
                15 * batch.host[:, None] + off,
                15 * batch.target[:, None] + off,
                (15 * nF + batch.lm)[:, None]), axis=1)
            blocks = w[:, None, None] * np.einsum("nki,nkj->nij", J, J)
            grads = w[:, None] * np.einsum("nki,nk->ni", J, r)
            flat = (cols[:, :, None] * dim + cols[:, None, :]).ravel()
            H += np.bincount(flat, blocks.ravel(), minlength=dim * dim).reshape(dim, dim)
            b -= np.bincount(cols.ravel(), grads.ravel(), minlength=dim)
        return H, b

    # solver --------------------------------------------------------------
    def _repropagate(self):
        for k in range(len(self.imu)):
            x = self.frames[k].state
            pre = self.imu[k]
            if (np.linalg.norm(x.ba - pre.ba_ref) > REPROPAGATE_AT
                    or np.linalg.norm(x.bg - pre.bg_ref) > REPROPAGATE_AT):
                self.imu[k] = pre.repropagate(x.ba, x.bg)
            if np.linalg.norm(x.bg - self.wheel[k].bg_ref) > REPROPAGATE_AT:
                self.wheel[k] = self.wheel[k].repropagate(x.bg)

    def solve(self):
        """Damped Gauss-Newton; returns the accepted cost trace."""
        cfg = self.config
        if len(self.frames) < 2:
            return []
        self._repropagate()
        tracks = self.active_tracks() if cfg.use_vision else []
        batch = _VisualBatch(self, tracks)
        factors = self.factors()
        S = StateArrays.from_states([f.state for f in self.frames])
        lam = np.array([tr.inv_depth for tr in tracks], dtype=float)
        nF = len(S)
        cost = self.evaluate_cost(S, lam, batch, factors)
        if not math.isfinite(cost):
            raise DivergenceError("non-finite initial cost", S.states())
        trace = [cost]
        damping = 1e-6
        eye = None
        for _ in range(cfg.max_iterations):
            H, b = self.assemble(S, lam, batch, factors)
            self.last_H = H
            if eye is None:
                eye = np.eye(len(b))
            accepted = False
            for _attempt in range(MAX_DAMPING_STEPS):
                try:
                    c, low = cho_factor(H + damping * eye)
                    dx = cho_solve((c, low), b)
                except (LinAlgError, ValueError):
                    damping *= 10.0
                    continue
                S_new = S.retract(dx[:15 * nF])
                new_lam = np.clip(lam + dx[15 * nF:], MIN_INV_DEPTH, MAX_INV_DEPTH)
                try:
                    new_cost = self.evaluate_cost(S_new, new_lam, batch, factors)
                except RepropagationRequired:
                    new_cost = math.inf
                if math.isfinite(new_cost) and new_cost <= cost:
                    accepted = True
                    break
                damping *= 10.0
            if not accepted:
                break
            rel = (cost - new_cost) / max(cost, 1e-300)
            S, lam, cost = S_new, new_lam, new_cost
            trace.append(cost)
            damping = max(damping / 10.0, 1e-12)
            if np.linalg.norm(dx) < 1e-8 or rel < 1e-9:
                break
        for f, x in zip(self.frames, S.states()):
            f.state = x
        for tr, l in zip(tracks, lam):
            tr.inv_depth = float(l)
        if not math.isfinite(cost) or S.is_diverged():
            raise DivergenceError("estimator diverged", S.states())
        self.cost_trace.append(trace)
        return trace

    def position_covariance(self, k=-1):
        """Marginal covariance of a frame position from the last Hessian."""
        if self.last_H is None:
            return None
        k = k % len(self.frames)
        H = self.last_H
        n = H.shape[0]
        e = np.zeros((n, 3))
        e[15 * k:15 * k + 3, :] = np.eye(3)
        try:
            c = cho_factor(H + 1e-12 * np.eye(n))
            return cho_solve(c, e)[15 * k:15 * k + 3, :]
        except LinAlgError:
            return np.linalg.pinv(H)[15 * k:15 * k + 3, 15 * k:15 * k + 3]

    # sliding -------------------------------------------------------------
    def slide(self):
        """Drop a second-newest non-keyframe, then marginalize the oldest
        keyframes until at most ``window_size`` remain."""
        if len(self.frames) >= 3 and not self.frames[-2].keyframe:
            self._drop_frame(len(self.frames) - 2)
        while self.keyframe_count() > self.config.window_size and len(self.frames) >= 3:
            self._marginalize_oldest()

    def _drop_frame(self, m):
        f = self.frames[m]
        states = self.states_by_id()
        self.imu[m - 1] = self.imu[m - 1].extended(self.imu[m])
        self.wheel[m - 1] = self.wheel[m - 1].extended(self.wheel[m])
        del self.imu[m], self.wheel[m]
        for tid in list(self.tracks):
            tr = self.tracks[tid]
            if tr.host == f.id:
                others = [k for k in tr.obs if k != f.id and k in states]
                if not others:
                    del self.tracks[tid]
                    continue
                self._rehost(tr, others[0], states)
            tr.obs.pop(f.id, None)
        del self.frames[m]

    def _rehost(self, tr, new_host, states):
        ex, cam = self.config.extr, self.config.cam
        xi = states[tr.host]
        P_c = vision.normalized_ray(cam, tr.obs[tr.host]) / tr.inv_depth
        P_w = xi.R @ (ex.R_cam_in_body @ P_c + ex.p_cam_in_body) + xi.p
        xj = states[new_host]
        P_new = ex.R_cam_in_body.T @ (xj.R.T @ (P_w - xj.p) - ex.p_cam_in_body)
        tr.host = new_host
        tr.inv_depth = 1.0 / P_new[2] if P_new[2] > 0.05 else 1.0 / vision.FALLBACK_DEPTH

    def _marginalize_oldest(self):
        cfg = self.config
        old = self.frames[0]
        pending = self.frames[-1].id
        hosted = [tr for tr in self.active_tracks() if tr.host == old.id] if cfg.use_vision else []
        hosted = [tr for tr in hosted if any(k not in (old.id, pending) for k in tr.obs)]
        batch = _VisualBatch(self, hosted, exclude_frame=pending)
        S = StateArrays.from_states([f.state for f in self.frames])
        lam = np.array([tr.inv_depth for tr in hosted], dtype=float)
        H, b = self.assemble(S, lam, batch, self.factors(first_only=True))
        nF = len(S)
        drop = np.concatenate((np.arange(15), 15 * nF + np.arange(len(hosted))))
        Hm, bm = marginalize(H, b, drop)
        Hm, bm = Hm[:15 * (nF - 1), :15 * (nF - 1)], bm[:15 * (nF - 1)]
        keep = [k for k in range(nF - 1) if np.any(Hm[15 * k:15 * k + 15, :] != 0.0)]
        cols = np.concatenate([np.arange(15 * k, 15 * k + 15) for k in keep]) if keep else np.zeros(0, int)
        rest = self.frames[1:]
        if keep:
            J, r0 = sqrt_factor(Hm[np.ix_(cols, cols)], bm[cols])
            self.prior = MarginalPrior([rest[k].id for k in keep], [rest[k].state for k in keep], J, r0)
        else:
            self.prior = None
        self.emitted.append((old.t, old.state.copy()))
        for tid in list(self.tracks):
            tr = self.tracks[tid]
            if tr.host == old.id:
                del self.tracks[tid]
            else:
                tr.obs.pop(old.id, None)
        del self.frames[0], self.imu[0], self.wheel[0]


def build_normal_equations(window):
    tracks = window.active_tracks() if window.config.use_vision else []
    batch = _VisualBatch(window, tracks)
    lam = np.array([tr.inv_depth for tr in tracks], dtype=float)
    return window.assemble(StateArrays.from_states([f.state for f in window.frames]), lam, batch)


def solve_window(window):
    window.solve()
    return window


def slide(window):
    window.slide()
    return window


def gauge_prior(frame):
    sp, sv, srp, syaw, sba, sbg = INIT_PRIOR_SIGMA
    x = frame.state
    M = np.eye(15)
    M[6:9, 6:9] = x.R
    w = np.concatenate(([1 / sp] * 3, [1 / sv] * 3, [1 / srp] * 2, [1 / syaw], [1 / sba] * 3, [1 / sbg] * 3))
    return MarginalPrior([frame.id], [x], w[:, None] * M, np.zeros(15))


class Estimator:
    """Drives initialization and the sliding window over a bundle stream."""

    def __init__(self, config=None):
        self.config = config or EstimatorConfig()
        self.window = None
        self.buffer = []
        self.history = []
        self.init_time = None

    @property
    def initialized(self):
        return self.window is not None

    def process(self, bundle):
        if self.window is None:
            self._buffer(bundle)
            return
        self.add_frame(bundle)

    def _buffer(self, bundle):
        if self.buffer and bundle.frame_t <= self.buffer[-1].frame_t:
            raise DataError("bundles out of order")
        self.buffer.append(bundle)
        marks = self._init_marks()
        if marks is None:
            return
        self.buffer = self.buffer[marks[0]:]
        marks = [m - marks[0] for m in marks]
        buf = self.buffer
        intervals = [
            InitInterval(buf[a].frame_t,
                         [s for j in range(a + 1, b + 1) for s in buf[j].imu],
                         [m for j in range(a + 1, b + 1) for m in buf[j].wheel])
            for a, b in zip(marks[:-1], marks[1:])
        ]
        cfg = self.config
        try:
            res = bootstrap(intervals, cfg.extr, cfg.noise)
        except InitializationError:
            self.buffer.pop(0)
            return
        w = SlidingWindow(cfg)
        for m, x in zip(marks, res.states):
            f = w.new_frame(buf[m].frame_t, x, True)
            if cfg.use_vision:
                w.add_observations(f, buf[m].features)
        w.imu = res.imu
        w.wheel = res.wheel
        w.prior = gauge_prior(w.frames[0])
        w.triangulate_new()
        self.window = w
        self.init_time = buf[-1].frame_t
        self.buffer = []
        w.solve()
        self._record()
        w.slide()

    def _init_marks(self):
        """Buffer indices of the K_MIN + 1 initialization keyframes, each at
        least ``init_interval`` after the previous one and ending at the
        newest bundle; ``None`` if the buffer is too short."""
        buf = self.buffer
        marks = [len(buf) - 1]
        for i in range(len(buf) - 2, -1, -1):
            if buf[marks[-1]].frame_t - buf[i].frame_t >= self.config.init_interval - 1e-9:
                marks.append(i)
                if len(marks) == K_MIN + 1:
                    return marks[::-1]
        return None

    def add_frame(self, bundle):
        w = self.window
        cfg = self.config
        last = w.frames[-1]
        if bundle.frame_t <= last.t + 1e-9:
            raise DataError(f"bundle at t={bundle.frame_t} does not follow t={last.t}")
        x = last.state
        imu = ImuPreintegration.from_samples(bundle.imu, last.t, x.ba, x.bg, cfg.noise)
        wheel = WheelPreintegration.from_meas(bundle.wheel, cfg.extr, x.bg, cfg.noise, last.t)
        f = w.new_frame(bundle.frame_t, predict(x, imu), False)
        f.state.t = bundle.frame_t
        w.imu.append(imu)
        w.wheel.append(wheel)
        if cfg.use_vision:
            w.add_observations(f, bundle.features)
        f.keyframe = w.is_keyframe(f)
        w.triangulate_new()
        w.solve()
        self._record()
        w.slide()

    def _record(self):
        w = self.window
        f = w.frames[-1]
        cov = w.position_covariance(-1) if self.config.record_covariance else None
        self.history.append((f.t, f.state.copy(), cov))

    def trajectory(self):
        """Finalized poses: marginalized frames followed by the current window."""
        if self.window is None:
            return []
        out = list(self.window.emitted)
        out += [(f.t, f.state.copy()) for f in self.window.frames]
        return out
