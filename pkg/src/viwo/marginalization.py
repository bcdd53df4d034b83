"""Schur-complement marginalization and the resulting linear prior."""

import numpy as np

from .errors import MarginalizationError
from .rotmath import (
    batch_quat_conj,
    batch_quat_log,
    batch_quat_mul,
    batch_right_jacobian_inv,
    quat_conj,
    quat_log,
    quat_mul,
    right_jacobian_inv,
)
from .state import StateArrays

EIG_FLOOR = 1e-10


def _pinv_psd(A, rel=1e-12):
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    if not np.all(np.isfinite(w)):
        raise MarginalizationError("non-finite block in marginalized system")
    top = max(w.max(initial=0.0), 0.0)
    if w.size and w.min() < -1e-8 * max(top, 1.0):
        raise MarginalizationError("marginalized block is not positive semidefinite")
    keep = w > rel * max(top, 1e-300)
    return (V[:, keep] / w[keep]) @ V[:, keep].T


def marginalize(H, b, drop):
    """Eliminate the indices in ``drop`` from ``H dx = b``.

    Returns ``(H', b')`` over the remaining indices in their original order.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    n = H.shape[0]
    drop = np.unique(np.asarray(drop, dtype=int))
    keep = np.setdiff1d(np.arange(n), drop)
    if drop.size == 0:
        return H.copy(), b.copy()
    Haa = H[np.ix_(drop, drop)]
    Hab = H[np.ix_(drop, keep)]
    Hbb = H[np.ix_(keep, keep)]
    Haa_inv = _pinv_psd(Haa)
    Hm = Hbb - Hab.T @ Haa_inv @ Hab
    bm = b[keep] - Hab.T @ Haa_inv @ b[drop]
    return 0.5 * (Hm + Hm.T), bm


def sqrt_factor(H, b):
    """``(J, r0)`` with ``J^T J = H`` and ``-J^T r0 = b`` (eigenvalues below
    the floor are dropped)."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    keep = w > EIG_FLOOR
    s = np.sqrt(w[keep])
    Vk = V[:, keep]
    J = s[:, None] * Vk.T
    r0 = -(Vk.T @ b) / s
    return J, r0


def state_delta(lin, x):
    """15-vector tangent difference ``x - lin``."""
    d = np.empty(15)
    d[0:3] = x.p - lin.p
    d[3:6] = x.v - lin.v
    d[6:9] = quat_log(quat_mul(quat_conj(lin.q), x.q))
    d[9:12] = x.ba - lin.ba
    d[12:15] = x.bg - lin.bg
    return d


class MarginalPrior:
    """Linear prior ``r = r0 + J dx`` on a set of frames.

    ``J`` is fixed at the linearization point; only the rotation tangent map
    is refreshed so that ``dx`` stays consistent with the manifold.
    """

    def __init__(self, frame_ids, lin_point, J, r0):
        self.frame_ids = list(frame_ids)
        self.lin_point = [x.copy() for x in lin_point]
        self.J = np.asarray(J, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self._lin = StateArrays.from_states(self.lin_point)
        if self.J.shape != (len(self.r0), 15 * len(self.frame_ids)):
            raise MarginalizationError("prior dimensions are inconsistent")

    @property
    def retained_ids(self):
        return {fid: k for k, fid in enumerate(self.frame_ids)}

    @property
    def H(self):
        return self.J.T @ self.J

    def residual(self, states):
        dx = np.concatenate([state_delta(l, x) for l, x in zip(self.lin_point, states)])
        return self.r0 + self.J @ dx

    def jacobian(self, states):
        J = self.J.copy()
        for k, (l, x) in enumerate(zip(self.lin_point, states)):
            phi = state_delta(l, x)[6:9]
            c = 15 * k + 6
            J[:, c:c + 3] = J[:, c:c + 3] @ right_jacobian_inv(phi)
        return J

    def _delta_arrays(self, S):
        L = self._lin
        phi = batch_quat_log(batch_quat_mul(batch_quat_conj(L.q), S.q))
        d = np.concatenate((S.p - L.p, S.v - L.v, phi, S.ba - L.ba, S.bg - L.bg), axis=1)
        return d, phi

    def evaluate(self, S, jacobian=True):
        """Residual and Jacobian for ``StateArrays`` of the prior frames."""
        d, phi = self._delta_arrays(S)
        r = self.r0 + self.J @ d.ravel()
        if not jacobian:
            return r, None
        n = len(self.frame_ids)
        J = self.J.reshape(-1, n, 5, 3).copy()
        J[:, :, 2, :] = np.einsum("mni,nij->mnj", J[:, :, 2, :], batch_right_jacobian_inv(phi))
        return r, J.reshape(self.J.shape)
