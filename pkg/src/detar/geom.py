"""Rigid-body geometry in float64: 3x3 SVD, Procrustes solvers, error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# number of svd3 invocations; lets callers assert a code path never touched SVD
SVD_CALLS = [0]

_RANK_TOL = 1e-9


class DegenerateError(ValueError):
    """Point configuration does not determine a rotation."""


@dataclass(frozen=True)
class RigidTransform:
    r: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.r.T + self.t

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def inverse(self):
        return RigidTransform(self.r.T, -self.r.T @ self.t)

    def compose(self, other):
        """``self`` applied after ``other``."""
        return RigidTransform(self.r @ other.r, self.r @ other.t + self.t)


@dataclass(frozen=True)
class Svd3:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def _orthonormal_complement(a):
    """Some unit vector perpendicular to each row-vector in ``a`` (...×3)."""
    pick = np.zeros_like(a)
    idx = np.argmin(np.abs(a), axis=-1)
    np.put_along_axis(pick, idx[..., None], 1.0, axis=-1)
    c = np.cross(a, pick)
    return c / np.linalg.norm(c, axis=-1, keepdims=True)


def _jacobi_svd(m, sweeps=30):
    """One-sided Jacobi SVD over a stack of 3x3 matrices (...×3×3)."""
    a = np.array(m, dtype=np.float64, copy=True)
    v = np.broadcast_to(np.eye(3), a.shape).copy()
    for _ in range(sweeps):
        off = 0.0
        for p, q in ((0, 1), (0, 2), (1, 2)):
            ap, aq = a[..., :, p], a[..., :, q]
            alpha = (ap * ap).sum(-1)
            beta = (aq * aq).sum(-1)
            gamma = (ap * aq).sum(-1)
            scale = np.sqrt(alpha * beta)
            rel = np.where(scale > 0, np.abs(gamma) / np.where(scale > 0, scale, 1), 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            act = rel > 1e-15
            g = np.where(act, gamma, 1.0)
            zeta = (beta - alpha) / (2 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = np.where(act, 1 / np.sqrt(1 + t * t), 1.0)
            s = np.where(act, c * t, 0.0)
            for mat in (a, v):
                mp = mat[..., :, p].copy()
                mq = mat[..., :, q]
                mat[..., :, p] = c[..., None] * mp - s[..., None] * mq
                mat[..., :, q] = s[..., None] * mp + c[..., None] * mq
        if off <= 1e-15:
            break
    sv = np.linalg.norm(a, axis=-2)
    order = np.argsort(-sv, axis=-1, kind="stable")
    sv = np.take_along_axis(sv, order, -1)
    a = np.take_along_axis(a, order[..., None, :], -1)
    v = np.take_along_axis(v, order[..., None, :], -1)
    u = np.empty_like(a)
    top = sv[..., 0]
    for k in range(3):
        ok = sv[..., k] > _RANK_TOL * np.maximum(top, 1e-300)
        col = a[..., :, k] / np.where(ok, sv[..., k], 1.0)[..., None]
        if k == 0:
            fill = np.broadcast_to(np.array([1.0, 0.0, 0.0]), col.shape)
        elif k == 1:
            fill = _orthonormal_complement(u[..., :, 0])
        else:
            fill = np.cross(u[..., :, 0], u[..., :, 1])
        u[..., :, k] = np.where(ok[..., None], col, fill)
    return u, sv, v


def svd3(m):
    """SVD of a 3x3 matrix, ``m = u @ diag(s) @ v.T`` with ``s`` descending."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"svd3 expects a 3x3 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd3: non-finite input")
    SVD_CALLS[0] += 1
    u, s, v = _jacobi_svd(m)
    return Svd3(u, s, v)


def _rotation_from_cov(h):
    """Rotation R minimizing sum w|R x - y|^2 given H = sum w x y^T (batched)."""
    u, s, v = _jacobi_svd(h)
    SVD_CALLS[0] += int(np.prod(h.shape[:-2], dtype=np.int64)) if h.ndim > 2 else 1
    degenerate = s[..., 1] <= _RANK_TOL * s[..., 0]
    d = np.sign(np.linalg.det(v @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    corr = np.broadcast_to(np.eye(3), h.shape).copy()
    corr[..., 2, 2] = d
    r = v @ corr @ np.swapaxes(u, -1, -2)
    return r, degenerate


def _check_inputs(x, y, w):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape != y.shape:
        raise ValueError(f"expected matching N×3 arrays, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise ValueError("need at least 3 correspondences")
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape != (n,):
        raise ValueError("weight vector length mismatch")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite input")
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateError("weights must be nonnegative with positive sum")
    return x, y, w


def weighted_procrustes_rotation(x, y_prime, w=None):
    """Rotation minimizing ``sum_i w_i |R x_i - y'_i|^2`` (no centering).

    ``y_prime`` is the target with the translation already removed.
    """
    x, y, w = _check_inputs(x, y_prime, w)
    h = (w[:, None] * x).T @ y
    if not np.any(h):
        raise DegenerateError("weighted cross-covariance is zero")
    r, bad = _rotation_from_cov(h)
    if bad:
        raise DegenerateError("weighted cross-covariance has rank < 2")
    return r


def weighted_kabsch_full(x, y, w=None):
    """Weighted Procrustes with centroid removal; returns R and t = ybar - R xbar."""
    x, y, w = _check_inputs(x, y, w)
    wn = w / w.sum()
    xc = wn @ x
    yc = wn @ y
    h = (wn[:, None] * (x - xc)).T @ (y - yc)
    if not np.any(h):
        raise DegenerateError("weighted cross-covariance is zero")
    r, bad = _rotation_from_cov(h)
    if bad:
        raise DegenerateError("weighted cross-covariance has rank < 2")
    return RigidTransform(r, yc - r @ xc)


def kabsch_batch(x, y):
    """Unweighted Kabsch over a stack of point sets (H×n×3). Returns (R, t, degenerate)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x.mean(axis=-2, keepdims=True)
    yc = y.mean(axis=-2, keepdims=True)
    h = np.swapaxes(x - xc, -1, -2) @ (y - yc)
    r, bad = _rotation_from_cov(h)
    bad |= ~np.any(h, axis=(-1, -2))
    t = yc[..., 0, :] - (r @ xc[..., 0, :, None])[..., 0]
    return r, t, bad


def rotation_error_iso(r_est, r_gt):
    """Geodesic angle between two rotations, in degrees."""
    r_est = np.asarray(r_est, dtype=np.float64)
    r_gt = np.asarray(r_gt, dtype=np.float64)
    m = r_gt.T @ r_est
    c = (np.trace(m) - 1) / 2
    # atan2 form equals arccos(clamp(c)) on exact rotations but keeps full
    # precision near 0 deg, where arccos amplifies 1e-8 rounding to 1e-4 rad
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.degrees(np.arctan2(s, np.clip(c, -1.0, 1.0))))


def translation_error_l2(t_est, t_gt):
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def axis_angle_to_rotation(v):
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta == 0:
        return np.eye(3)
    k = v / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def rotation_to_axis_angle(r):
    """Inverse of :func:`axis_angle_to_rotation` for angles below pi."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.arccos(np.clip((np.trace(r) - 1) / 2, -1, 1))
    if theta < 1e-12:
        return np.zeros(3)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta * w / (2 * np.sin(theta))


def random_rotation(rng, max_deg=180.0, min_deg=0.0):
    """Rotation about a uniformly random axis by an angle uniform in [min_deg, max_deg]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(min_deg, max_deg))
    return axis_angle_to_rotation(axis * angle)


def is_rotation(r, tol=1e-6):
    r = np.asarray(r, dtype=np.float64)
    return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1) < tol)
