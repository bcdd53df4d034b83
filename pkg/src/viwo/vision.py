"""Inverse-depth landmarks and the unit-sphere reprojection residual."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError
from .rotmath import rot_from_quat, skew

MIN_POINT_NORM = 1e-6
MIN_PARALLAX = 0.02
FALLBACK_DEPTH = 5.0
SIGMA_PX = 1.5


@dataclass(frozen=True)
class CameraModel:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    def in_image(self, u, v):
        return 0.0 <= u < self.width and 0.0 <= v < self.height


@dataclass(eq=False)
class FeatureTrack:
    """Landmark anchored in its host frame by inverse depth.

    ``obs`` maps frame id to pixel ``(u, v)``.
    """

    id: int
    host: int
    inv_depth: float = 1.0 / FALLBACK_DEPTH
    obs: dict = field(default_factory=dict)


def normalized_ray(cam, px):
    """Point on the z = 1 plane for pixel ``px``."""
    return np.array([(px[0] - cam.cx) / cam.fx, (px[1] - cam.cy) / cam.fy, 1.0])


def back_project(cam, px):
    f = normalized_ray(cam, px)
    return f / np.linalg.norm(f)


def project(cam, P):
    return np.array([cam.fx * P[0] / P[2] + cam.cx, cam.fy * P[1] / P[2] + cam.cy])


def tangent_basis(n):
    n = np.asarray(n, dtype=float)
    a = np.array([1.0, 0.0, 0.0]) if abs(n[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    b1 = np.cross(n, a)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(n, b1)


def huber_weight(s):
    """IRLS weight for squared Mahalanobis norm ``s`` (threshold 1)."""
    return 1.0 if s <= 1.0 else 1.0 / math.sqrt(s)


def huber_cost(s):
    return s if s <= 1.0 else 2.0 * math.sqrt(s) - 1.0


def visual_sqrt_info(cam, sigma_px=SIGMA_PX):
    """Scalar whitening factor for the 2D tangent-plane residual."""
    return cam.fx / sigma_px


def _chain(track, j, x_i, x_j, extr, cam):
    if track.inv_depth <= 0.0:
        raise DegenerateGeometryError(f"feature {track.id}: non-positive inverse depth")
    f = normalized_ray(cam, track.obs[track.host])
    R_bc, p_bc = extr.R_cam_in_body, extr.p_cam_in_body
    P_bi = R_bc @ (f / track.inv_depth) + p_bc
    R_i, R_j = rot_from_quat(x_i.q), rot_from_quat(x_j.q)
    P_w = R_i @ P_bi + x_i.p
    P_bj = R_j.T @ (P_w - x_j.p)
    P = R_bc.T @ (P_bj - p_bc)
    norm = np.linalg.norm(P)
    if norm < MIN_POINT_NORM:
        raise DegenerateGeometryError(f"feature {track.id}: point collapses onto camera {j}")
    n = back_project(cam, track.obs[j])
    b1, b2 = tangent_basis(n)
    return f, P_bi, P_bj, P, norm, n, np.vstack((b1, b2)), R_i, R_j


def visual_residual(track, j, x_i, x_j, extr, cam):
    _, _, _, P, norm, n, Bm, _, _ = _chain(track, j, x_i, x_j, extr, cam)
    return Bm @ (P / norm - n)


def visual_jacobian(track, j, x_i, x_j, extr, cam):
    """2x13 Jacobian w.r.t. ``[dp_i, dtheta_i, dp_j, dtheta_j, dlambda]``."""
    f, P_bi, P_bj, P, norm, _, Bm, R_i, R_j = _chain(track, j, x_i, x_j, extr, cam)
    R_bc = extr.R_cam_in_body
    dr_dPc = Bm @ (np.eye(3) / norm - np.outer(P, P) / norm ** 3)
    dr_dPbj = dr_dPc @ R_bc.T
    dr_dPw = dr_dPbj @ R_j.T
    J = np.empty((2, 13))
    J[:, 0:3] = dr_dPw
    J[:, 3:6] = -dr_dPw @ R_i @ skew(P_bi)
    J[:, 6:9] = -dr_dPw
    J[:, 9:12] = dr_dPbj @ skew(P_bj)
    J[:, 12] = dr_dPw @ R_i @ R_bc @ (-f / track.inv_depth ** 2)
    return J


def _batch_skew(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def batch_tangent_basis(n):
    use_x = np.abs(n[:, 2]) > 0.9
    a = np.zeros_like(n)
    a[use_x, 0] = 1.0
    a[~use_x, 2] = 1.0
    b1 = np.cross(n, a)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    return np.stack((b1, np.cross(n, b1)), axis=1)


def batch_visual(f_host, basis, n_obs, lam, R_i, p_i, R_j, p_j, extr, jacobian=True):
    """Vectorized residuals (N, 2) and Jacobians (N, 2, 13).

    ``basis`` is the (N, 2, 3) stacked tangent basis of the observed bearings.
    Returns a validity mask instead of raising on degenerate points.
    """
    R_bc, p_bc = extr.R_cam_in_body, extr.p_cam_in_body
    P_ci = f_host / lam[:, None]
    P_bi = P_ci @ R_bc.T + p_bc
    P_w = np.einsum("nij,nj->ni", R_i, P_bi) + p_i
    P_bj = np.einsum("nji,nj->ni", R_j, P_w - p_j)
    P = (P_bj - p_bc) @ R_bc
    norm = np.linalg.norm(P, axis=1)
    valid = (norm >= MIN_POINT_NORM) & (lam > 0.0)
    safe = np.where(valid, norm, 1.0)
    u = P / safe[:, None]
    r = np.einsum("nij,nj->ni", basis, u - n_obs)
    if not jacobian:
        return r, None, valid
    proj = np.eye(3)[None] / safe[:, None, None] - np.einsum("ni,nj->nij", P, P) / (safe ** 3)[:, None, None]
    dr_dPc = basis @ proj
    dr_dPbj = dr_dPc @ R_bc.T
    dr_dPw = dr_dPbj @ np.transpose(R_j, (0, 2, 1))
    J = np.empty((len(lam), 2, 13))
    J[:, :, 0:3] = dr_dPw
    dr_dPbi = dr_dPw @ R_i
    J[:, :, 3:6] = -dr_dPbi @ _batch_skew(P_bi)
    J[:, :, 6:9] = -dr_dPw
    J[:, :, 9:12] = dr_dPbj @ _batch_skew(P_bj)
    J[:, :, 12] = np.einsum("nij,nj->ni", dr_dPbi, (-f_host / (lam ** 2)[:, None]) @ R_bc.T)
    return r, J, valid


def triangulate_inv_depth(track, states, extr, cam):
    """Inverse depth in the host camera from all observations in ``states``.

    ``states`` maps frame id to ``KeyframeState``. The point minimises the
    summed squared distance to every observing ray. Falls back to a 5 m depth
    when the widest parallax to the host ray is too small or the point lies
    behind the host.
    """
    ids = [track.host] + [k for k in track.obs if k != track.host and k in states]
    if len(ids) < 2 or track.host not in states:
        return 1.0 / FALLBACK_DEPTH
    R_bc, p_bc = extr.R_cam_in_body, extr.p_cam_in_body
    rays, centers = [], []
    for k in ids:
        x = states[k]
        R = rot_from_quat(x.q)
        d = R @ R_bc @ back_project(cam, track.obs[k])
        rays.append(d / np.linalg.norm(d))
        centers.append(R @ p_bc + x.p)
    rays, centers = np.array(rays), np.array(centers)
    cos_par = float(np.clip(np.min(rays[1:] @ rays[0]), -1.0, 1.0))
    if math.acos(cos_par) < MIN_PARALLAX:
        return 1.0 / FALLBACK_DEPTH
    proj = np.eye(3)[None] - rays[:, :, None] * rays[:, None, :]
    A = proj.sum(axis=0)
    rhs = np.einsum("nij,nj->i", proj, centers)
    X = np.linalg.solve(A, rhs)
    x = states[track.host]
    P_c = R_bc.T @ (rot_from_quat(x.q).T @ (X - x.p) - p_bc)
    if P_c[2] <= 0.05:
        return 1.0 / FALLBACK_DEPTH
    return 1.0 / P_c[2]
