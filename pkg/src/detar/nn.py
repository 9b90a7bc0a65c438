"""DetarNet: drift-based translation regression plus inlier classification for rotation.

Layout of a forward pass::

    embed (shared 3->C)  ->  K x cfd_layer  ->  translation_head -> t
                                 |                  drift_head_l -> t_l
                                 v
    ceu_features(y - t - x, per-layer feature differences) -> classify -> logits
    w = tanh(relu(logits)) -> weighted Procrustes on (x, y - t) -> R
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geom
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

T_HEADS = ("regress", "svd")
R_HEADS = ("svd", "regress")
BLOCKS = ("sca", "cn")


@dataclass
class DetarConfig:
    k_cfd: int = 10
    m_sca: int = 4
    channels: int = 128
    groups: int = 8
    n_corr: int = 2560
    t_head: str = "regress"
    r_head: str = "svd"
    ceu: bool = True
    blocks: str = "sca"

    @classmethod
    def desk(cls, **kw):
        """Desk-scale defaults: C=64, N=512."""
        kw.setdefault("channels", 64)
        kw.setdefault("n_corr", 512)
        return cls(**kw)

    def validate(self):
        if self.k_cfd < 1:
            raise ValueError("k_cfd must be >= 1")
        if self.m_sca < 0:
            raise ValueError("m_sca must be >= 0")
        if self.channels < 1 or self.channels % self.groups:
            raise ValueError(f"channels ({self.channels}) must be divisible by groups ({self.groups})")
        if self.n_corr < 3:
            raise ValueError("n_corr must be >= 3")
        if self.t_head not in T_HEADS:
            raise ValueError(f"t_head must be one of {T_HEADS}")
        if self.r_head not in R_HEADS:
            raise ValueError(f"r_head must be one of {R_HEADS}")
        if self.blocks not in BLOCKS:
            raise ValueError(f"blocks must be one of {BLOCKS}")
        return self

    def to_dict(self):
        return asdict(self)


def _param_rng(seed, name):
    key = int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


class Params:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.bn: dict[str, T.BatchNormState] = {}

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def add(self, name, value):
        self.tensors[name] = Tensor(value, requires_grad=True, name=name)

    def zero_grad(self):
        for p in self.tensors.values():
            p.grad = None

    def count(self):
        return int(sum(p.data.size for p in self.tensors.values()))


def _spec_shapes(cfg):
    """(name, shape, kind) for every parameter the config needs."""
    c, k = cfg.channels, cfg.k_cfd
    out = []

    def lin(name, cin, cout):
        out.append((f"{name}.w", (cin, cout), ("kaiming", cin)))
        out.append((f"{name}.b", (cout,), ("zeros",)))

    def bn(name, ch):
        out.append((f"{name}.g", (ch,), ("ones",)))
        out.append((f"{name}.b", (ch,), ("zeros",)))

    def cn(name):
        lin(f"{name}.lin1", c, c)
        bn(f"{name}.bn1", c)
        lin(f"{name}.lin2", c, c)
        bn(f"{name}.bn2", c)

    lin("embed", 3, c)
    for l in range(1, k + 1):
        cn(f"cfd{l}.cn")
        lin(f"cfd{l}.gi", c, 1)
        lin(f"drift{l}", c, 3)
    if cfg.t_head == "regress":
        lin("trans", k * c, 3)
    lin("ceu.coord", 3, c)
    lin("cls.in", 2 * c if cfg.ceu else c, c)
    for m in range(1, cfg.m_sca + 1):
        name = f"cls.blk{m}"
        if cfg.blocks == "sca":
            lin(f"{name}.sa.lin", c, c)
            lin(f"{name}.sa.att", c, 1)
            bn(f"{name}.bn", c)
            cg = c // cfg.groups
            out.append((f"{name}.ca.w", (cfg.groups, cg, cg), ("kaiming", cg)))
            out.append((f"{name}.ca.b", (c,), ("zeros",)))
        else:
            cn(name)
    lin("cls.out", c, 1)
    if cfg.r_head == "regress":
        lin("rreg", c, 3)
    return out


def bn_names(cfg):
    return sorted({n.rsplit(".", 1)[0] for n, _, kind in _spec_shapes(cfg) if kind == ("ones",)})


def init_params(cfg, seed, dtype=None):
    """Kaiming-uniform weights, zero biases; each tensor drawn from its own (seed, name) stream."""
    cfg.validate()
    dtype = dtype or T.default_dtype()
    p = Params()
    for name, shape, kind in _spec_shapes(cfg):
        if kind[0] == "kaiming":
            bound = np.sqrt(6.0 / kind[1])
            val = _param_rng(seed, name).uniform(-bound, bound, size=shape)
        elif kind[0] == "ones":
            val = np.ones(shape)
        else:
            val = np.zeros(shape)
        p.tensors[name] = Tensor(val.astype(dtype), requires_grad=True, name=name)
    for name in bn_names(cfg):
        p.bn[name] = T.BatchNormState(cfg.channels)
    return p


@dataclass
class PcfdTrace:
    """Per-layer outputs. ``feats[l]`` stacks the drifted source stream on top of the target stream."""
    feats: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    t_layers: list = field(default_factory=list)

    def fx(self, l):
        f = self.feats[l]
        return f[: f.shape[0] // 2]

    def fy(self, l):
        f = self.feats[l]
        return f[f.shape[0] // 2:]

    def differences(self):
        return [T.half_diff(f) for f in self.feats]


@dataclass
class NetOutput:
    t: Tensor
    logits: Tensor
    r: object  # np.ndarray (svd head, constant) or Tensor (regress head)
    w: Tensor
    trace: PcfdTrace
    order: np.ndarray = None  # trace features are stored in this point order
    fallbacks: int = 0

    def r_numpy(self):
        return np.asarray(self.r.data if isinstance(self.r, Tensor) else self.r, dtype=np.float64)


class DetarNet:
    """Config + parameters, with one method per network block."""

    def __init__(self, cfg, params=None, seed=0):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg, seed)
        self.training = False

    def _lin(self, x, name):
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _bn(self, x, name):
        return T.batch_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"],
                            self.params.bn[name], self.training)

    # -- blocks --------------------------------------------------------------

    def cn_block(self, x, name):
        h = T.relu(self._bn(T.context_norm(self._lin(x, f"{name}.lin1")), f"{name}.bn1"))
        h = T.relu(self._bn(T.context_norm(self._lin(h, f"{name}.lin2")), f"{name}.bn2"))
        return T.add(x, h)

    def global_interaction(self, fx, fy, layer):
        return self._interaction(T.sub(fy, fx), layer)

    def _interaction(self, d, layer):
        w = T.sigmoid(self._lin(d, f"cfd{layer}.gi"))
        return T.weighted_mean_over_points(d, w)

    def cfd_layer(self, fx, fy, layer):
        b = fx.shape[0]
        out, delta = self.cfd_stacked(T.concat([fx, fy], axis=0), layer)
        return out[:b], out[b:], delta

    def cfd_stacked(self, f, layer):
        """One drift layer on source/target streams stacked along the batch axis.

        Both streams go through a single cn_block call, so the Siamese weights
        are literally the same tensors.
        """
        f = self.cn_block(f, f"cfd{layer}.cn")
        delta = self._interaction(T.half_diff(f), layer)
        zeros = np.zeros(delta.shape, dtype=delta.data.dtype)
        return T.add(f, T.concat([delta, zeros], axis=0)), delta

    def drift_head(self, delta_sum, layer):
        t = self._lin(delta_sum, f"drift{layer}")
        return T.reshape(t, (t.shape[0], 3))

    def translation_head(self, deltas):
        t = self._lin(T.concat(deltas, axis=-1), "trans")
        return T.reshape(t, (t.shape[0], 3))

    def ceu_features(self, x, y, t, trace):
        """Translation-removed coordinate branch concatenated with max-pooled layer differences.

        ``t`` is used as a constant here (None means no translation removal).
        """
        off = np.asarray(y, dtype=T.default_dtype()) - np.asarray(x, dtype=T.default_dtype())
        if t is not None:
            tv = t.data if isinstance(t, Tensor) else np.asarray(t)
            off = off - tv[:, None, :].astype(off.dtype)
        coord = self._lin(Tensor(off), "ceu.coord")
        if not self.cfg.ceu:
            return coord
        return T.concat([coord, T.max_over_layers(trace.differences())], axis=-1)

    def sca_block(self, f, name):
        h = self._lin(f, f"{name}.sa.lin")
        a = T.softmax_over_points(self._lin(h, f"{name}.sa.att"))
        z = T.relu(self._bn(T.weighted_context_norm(h, a), f"{name}.bn"))
        gate = T.sigmoid(T.group_linear(z, self.params[f"{name}.ca.w"], self.params[f"{name}.ca.b"]))
        return T.add(f, T.mul(z, gate))

    def classify(self, feat):
        """Returns (logits B×N×1, final per-point features)."""
        h = self._lin(feat, "cls.in")
        for m in range(1, self.cfg.m_sca + 1):
            name = f"cls.blk{m}"
            h = self.sca_block(h, name) if self.cfg.blocks == "sca" else self.cn_block(h, name)
        return self._lin(h, "cls.out"), h

    # -- full pass -------------------------------------------------------------

    def pcfd(self, x, y):
        trace = PcfdTrace()
        f = self._lin(Tensor(np.concatenate([x, y], axis=0)), "embed")
        acc = None
        for l in range(1, self.cfg.k_cfd + 1):
            f, delta = self.cfd_stacked(f, l)
            acc = delta if acc is None else T.add(acc, delta)
            trace.feats.append(f)
            trace.deltas.append(delta)
            trace.t_layers.append(self.drift_head(acc, l))
        return trace

    def forward(self, x, y, training=False, logits_override=None):
        """Run the network on batched coordinates ``x``, ``y`` (B×N×3).

        ``logits_override`` replaces the classifier output (test hook).
        """
        self.training = training
        dt = T.default_dtype()
        x = np.asarray(x, dtype=dt)
        y = np.asarray(y, dtype=dt)
        if x.ndim == 2:
            x, y = x[None], y[None]
        if x.shape != y.shape or x.shape[-1] != 3:
            raise T.ShapeError(f"bad input shapes {x.shape}, {y.shape}")
        # run in a canonical point order so any input permutation performs
        # bit-identical arithmetic; per-point outputs are mapped back at the end
        order = canonical_order(x, y)
        inv = np.argsort(order, axis=1)
        x = np.take_along_axis(x, order[..., None], axis=1)
        y = np.take_along_axis(y, order[..., None], axis=1)
        trace = self.pcfd(x, y)
        t_reg = self.translation_head(trace.deltas) if self.cfg.t_head == "regress" else None
        feat = self.ceu_features(x, y, t_reg, trace)
        logits, h = self.classify(feat)
        if logits_override is not None:
            lo = np.asarray(logits_override, dtype=dt).reshape(logits.shape)
            logits = Tensor(np.take_along_axis(lo, order[..., None], axis=1))
        w = T.relu(logits)
        w = T.tanh(w)
        fallbacks = 0
        if self.cfg.t_head == "regress":
            t = t_reg
        else:
            t, fallbacks = _svd_translation(x, y, w, logits)
        if self.cfg.r_head == "svd":
            r, fb = svd_rotation(x, y, t.data, w.data[..., 0], logits.data[..., 0])
            fallbacks = max(fallbacks, fb)
        else:
            v = self._lin(T.mean_over_points(h), "rreg")
            r = T.rodrigues(T.reshape(v, (v.shape[0], 3)))
        return NetOutput(t=t, logits=T.permute_points(logits, inv),
                         r=r, w=T.reshape(T.permute_points(w, inv), w.shape[:-1]),
                         trace=trace, order=order, fallbacks=fallbacks)

    __call__ = forward


def canonical_order(x, y):
    """Per-instance lexicographic order of the rows of [x | y] (B×N)."""
    keys = np.concatenate([x, y], axis=-1)
    return np.stack([np.lexsort(k.T[::-1]) for k in keys])


def _safe_weights(w, logits):
    """Per-instance weights, swapping in sigmoid(logits) where tanh(relu) is all zero."""
    ok = w.sum(axis=-1) > 1e-6
    if np.all(ok):
        return w, 0
    sig = 1 / (1 + np.exp(-np.clip(logits, -50, 50)))
    return np.where(ok[:, None], w, sig), int((~ok).sum())


def svd_rotation(x, y, t, w, logits):
    """Weighted Procrustes rotation per instance on (x, y - t); weights are constants."""
    b = x.shape[0]
    w, fallbacks = _safe_weights(np.asarray(w, np.float64), np.asarray(logits, np.float64))
    r = np.empty((b, 3, 3))
    for i in range(b):
        try:
            r[i] = geom.weighted_procrustes_rotation(x[i], y[i] - t[i], w[i])
        except geom.DegenerateError:
            r[i] = np.eye(3)
            fallbacks += 1
    return r, fallbacks


def _svd_translation(x, y, w, logits):
    """t = ybar_w - R xbar_w; R is held constant, the weighted centroids carry gradient."""
    b = x.shape[0]
    wd = w.data[..., 0].astype(np.float64)
    ok = wd.sum(axis=-1) > 1e-6
    fallbacks = int((~ok).sum())
    if fallbacks:
        mask = ok[:, None, None].astype(w.data.dtype)
        w = T.add(T.mul(w, mask), T.mul(T.sigmoid(logits), 1 - mask))
    xbar = T.weighted_mean_over_points(Tensor(x), w, eps=1e-12)
    ybar = T.weighted_mean_over_points(Tensor(y), w, eps=1e-12)
    wn = w.data[..., 0].astype(np.float64)
    r = np.empty((b, 3, 3))
    for i in range(b):
        try:
            r[i] = geom.weighted_kabsch_full(x[i], y[i], wn[i]).r
        except geom.DegenerateError:
            r[i] = np.eye(3)
            fallbacks += 1
    rt = Tensor(np.swapaxes(r, -1, -2))
    t = T.sub(ybar, T.matmul(xbar, rt))
    return T.reshape(t, (b, 3)), fallbacks
