"""Training losses: translation, classification, alignment, and per-layer drift."""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossWeights:
    trans: float = 2.0
    cls: float = 1.0
    align: float = 1.0
    drift: float = 0.05

    def __post_init__(self):
        vals = np.array(astuple(self), dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError(f"loss weights must be finite and nonnegative: {astuple(self)}")

    @classmethod
    def parse(cls, text):
        """From 'a,b,c,d'."""
        return cls(*[float(v) for v in text.split(",")])


def trans_loss(t_est, t_gt):
    """Mean over the batch of |t_est - t_gt| (unsquared)."""
    return T.mean(T.norm(T.sub(t_est, np.asarray(t_gt, dtype=T.default_dtype())), axis=-1))


def balance_weights(labels):
    """Per-element BCE weights giving inliers and outliers equal total mass per instance.

    Instances with only one class keep unit weights.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[-1]
    pos = labels.sum(axis=-1, keepdims=True)
    neg = n - pos
    both = (pos > 0) & (neg > 0)
    wp = np.where(both, n / (2 * np.maximum(pos, 1)), 1.0)
    wn = np.where(both, n / (2 * np.maximum(neg, 1)), 1.0)
    return np.where(labels > 0, wp, wn)


def cls_loss(logits, labels):
    """Class-balanced binary cross-entropy with logits, averaged over B×N."""
    labels = np.asarray(labels, dtype=np.float64)
    b, n = labels.shape
    z = T.reshape(logits, (b, n))
    return T.scale(T.bce_with_logits(z, labels, balance_weights(labels)), 1.0 / (b * n))


def _masked_distance(x, y, mask, r, t):
    """sum_i m_i |y_i - (R x_i + t)| / (B N) for batched inputs; R may be a Tensor."""
    dt = T.default_dtype()
    x = np.asarray(x, dtype=dt)
    y = np.asarray(y, dtype=dt)
    mask = np.asarray(mask, dtype=dt)
    b, n, _ = x.shape
    if isinstance(r, Tensor):
        rx = T.matmul(Tensor(x), T.transpose(r, (0, 2, 1)))
        res = T.sub(T.sub(y, rx), T.reshape(t, (b, 1, 3)))
    else:
        base = y - x @ np.swapaxes(np.asarray(r, dtype=dt), -1, -2)
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=dt))
        res = T.sub(base, T.reshape(t, (b, 1, 3)))
    return T.scale(T.sum(T.mul(T.norm(res, axis=-1), mask)), 1.0 / (b * n))


def align_loss(x, y, mask, r_est, t_est):
    """(1/N) sum_i m_i |y_i - (R x_i + t)|, batch-averaged.

    A numpy ``r_est`` (the SVD head) is a constant; a Tensor ``r_est`` (the
    regression head) receives gradient.
    """
    return _masked_distance(x, y, mask, r_est, t_est)


def drift_loss(x, y, mask, r_gt, t_layers):
    """Alignment with the ground-truth rotation, averaged over every layer's translation."""
    if not t_layers:
        raise ValueError("drift_loss needs at least one layer")
    parts = [_masked_distance(x, y, mask, r_gt, t) for t in t_layers]
    acc = parts[0]
    for p in parts[1:]:
        acc = T.add(acc, p)
    return T.scale(acc, 1.0 / len(parts))


def total_loss(parts, weights):
    """lambda-weighted sum of the four terms; ``parts`` maps name -> scalar Tensor."""
    out = None
    for name in ("trans", "cls", "align", "drift"):
        lam = getattr(weights, name)
        if name not in parts or lam == 0:
            continue
        term = T.scale(parts[name], lam)
        out = term if out is None else T.add(out, term)
    if out is None:
        out = Tensor(np.zeros((), dtype=T.default_dtype()))
    return out


def network_losses(out, x, y, labels, r_gt, t_gt, weights):
    """All four terms for one forward output; returns (total, {name: Tensor})."""
    parts = {
        "trans": trans_loss(out.t, t_gt),
        "cls": cls_loss(out.logits, labels),
        "align": align_loss(x, y, labels, out.r, out.t),
        "drift": drift_loss(x, y, labels, r_gt, out.trace.t_layers),
    }
    return total_loss(parts, weights), parts
