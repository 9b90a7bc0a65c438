"""Classical registration baselines: RANSAC, point-to-point ICP, all-pairs Procrustes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .data import TAU_LABEL
from .geom import RigidTransform


@dataclass
class RansacResult:
    transform: RigidTransform
    mask: np.ndarray
    ok: bool
    best_iter: int = -1
    n_inliers: int = 0


def _residuals(x, y, r, t):
    """|y - (R x + t)| for hypotheses r (H×3×3), t (H×3) -> H×N."""
    pred = np.einsum("hij,nj->hni", r, x) + t[:, None, :]
    return np.linalg.norm(y[None] - pred, axis=-1)


def ransac(corr, iters=1000, inlier_thresh=TAU_LABEL, seed=0, chunk=250, refits=10):
    """Three-point RANSAC over putative correspondences, refit on the best consensus set.

    Degenerate (collinear or coincident) samples score zero inliers. If no
    hypothesis reaches three inliers the result is the identity with an
    empty mask and ``ok=False``.
    """
    x = np.asarray(corr.x, dtype=np.float64)
    y = np.asarray(corr.y, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise ValueError("ransac needs at least 3 correspondences")
    rng = np.random.default_rng(seed)
    # three distinct indices per hypothesis
    samples = np.argsort(rng.random((iters, n)), axis=1)[:, :3]
    best_count, best_iter, best_model = -1, -1, None
    for s in range(0, iters, chunk):
        idx = samples[s:s + chunk]
        r, t, bad = geom.kabsch_batch(x[idx], y[idx])
        counts = (_residuals(x, y, r, t) < inlier_thresh).sum(axis=1)
        counts[bad] = -1
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_iter, best_model = int(counts[k]), s + k, (r[k], t[k])
    if best_count < 3:
        return RansacResult(RigidTransform.identity(), np.zeros(n, dtype=bool), False, best_iter, max(best_count, 0))
    fit = RigidTransform(*best_model)
    mask = _residuals(x, y, fit.r[None], fit.t[None])[0] < inlier_thresh
    # refit on the consensus set until it stops changing, so the returned
    # transform is the least-squares fit of exactly the returned mask
    for _ in range(refits):
        try:
            new = geom.weighted_kabsch_full(x[mask], y[mask])
        except geom.DegenerateError:
            break
        new_mask = _residuals(x, y, new.r[None], new.t[None])[0] < inlier_thresh
        if new_mask.sum() < 3:
            break
        fit, changed, mask = new, not np.array_equal(new_mask, mask), new_mask
        if not changed:
            break
    return RansacResult(fit, mask, True, best_iter, best_count)


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    converged: bool


def _nearest(src, dst):
    d2 = (src * src).sum(1)[:, None] - 2 * src @ dst.T + (dst * dst).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def icp(x_points, y_points, max_iters=50, tol=1e-8, init=None):
    """Point-to-point ICP with exact brute-force nearest neighbours.

    Pairing in the inputs is ignored; both are treated as plain clouds.
    Stops when the estimate moves by less than ``tol`` (radians + units).
    """
    x = np.asarray(x_points, dtype=np.float64)
    y = np.asarray(y_points, dtype=np.float64)
    if len(x) < 3 or len(y) < 3:
        raise ValueError("icp needs at least 3 points per cloud")
    cur = init or RigidTransform.identity()
    for it in range(1, max_iters + 1):
        nn = _nearest(cur.apply(x), y)
        try:
            new = geom.weighted_kabsch_full(x, y[nn])
        except geom.DegenerateError:
            return IcpResult(cur, it, False)
        change = np.radians(geom.rotation_error_iso(new.r, cur.r)) + np.linalg.norm(new.t - cur.t)
        cur = new
        if change < tol:
            return IcpResult(cur, it, True)
    return IcpResult(cur, max_iters, False)


def procrustes_all(corr):
    """Unit-weight Kabsch over every correspondence, outliers included."""
    return geom.weighted_kabsch_full(corr.x, corr.y)
