"""Central finite-difference gradient checks for the tensor engine."""
from __future__ import annotations

import numpy as np

from . import tensor as T


def _scalarize(out, proj):
    return T.sum(T.mul(out, proj))


def numeric_grad(fn, inputs, proj, h=1e-6, coords=None):
    """d/d(inputs) of sum(fn(*inputs) * proj) by central differences, on raw arrays."""
    grads = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x.data)
        idx_iter = coords[k] if coords is not None else np.ndindex(*x.shape)
        for idx in idx_iter:
            old = x.data[idx]
            x.data[idx] = old + h
            with T.no_grad():
                fp = float(np.sum(fn(*inputs).data * proj))
            x.data[idx] = old - h
            with T.no_grad():
                fm = float(np.sum(fn(*inputs).data * proj))
            x.data[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn, inputs, proj):
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = fn(*inputs)
    T.backward(_scalarize(out, T.Tensor(proj)))
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]


def rel_error(a, n):
    a = np.concatenate([np.ravel(v) for v in a])
    n = np.concatenate([np.ravel(v) for v in n])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check(fn, inputs, seed=0, h=1e-6, max_coords=None):
    """Relative error between backprop and finite differences for ``fn(*inputs)``.

    Inputs must be float64 Tensors. With ``max_coords`` only a random subset
    of each input's entries is perturbed.
    """
    # separate stream so the projection never coincides with same-seed inputs
    rng = np.random.default_rng([seed, 0x5eed])
    with T.no_grad():
        shape = fn(*inputs).data.shape
    proj = rng.normal(size=shape)
    coords = None
    if max_coords is not None:
        coords = []
        for x in inputs:
            all_idx = list(np.ndindex(*x.shape))
            pick = rng.choice(len(all_idx), size=min(max_coords, len(all_idx)), replace=False)
            coords.append([all_idx[i] for i in pick])
    an = analytic_grad(fn, inputs, proj)
    nu = numeric_grad(fn, inputs, proj, h=h, coords=coords)
    if coords is not None:
        an = [np.array([a[i] for i in c]) for a, c in zip(an, coords)]
        nu = [np.array([n[i] for i in c]) for n, c in zip(nu, coords)]
    return rel_error(an, nu)
