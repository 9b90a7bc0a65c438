"""Adam, the training loop, and DTRN checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from . import loss as L
from . import tensor as T
from .data import stack
from .nn import DetarConfig, DetarNet, Params, init_params

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DTRN"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr=None):
    """One bias-corrected Adam update over every parameter that has a gradient.

    ``params`` is a :class:`Params` or a mapping name -> Tensor. Raises
    before touching anything if some gradient is non-finite.
    """
    items = list(params) if isinstance(params, Params) else list(params.items())
    for name, p in items:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in items:
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.data.dtype)
    return state


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    clip_norm: float | None = None
    lr_schedule: str | None = None  # None | "cosine"
    max_steps: int | None = None
    head_weight_decay: float = 0.0  # L2 on the translation readout, scaled by loss weight for drift readouts


@dataclass
class Checkpoint:
    config: DetarConfig
    params: Params
    adam: AdamState | None = None
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)

    def net(self):
        return DetarNet(self.config, self.params)


HEADS = ("trans.", "drift")


def _lr_at(tc, step, total):
    if tc.lr_schedule is None:
        return tc.lr
    if tc.lr_schedule == "cosine":
        return 0.5 * tc.lr * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))
    raise ValueError(f"unknown lr schedule {tc.lr_schedule!r}")


def _head_decay(params, wd, weights, k):
    # the translation readout sees K*C features from a few hundred sets and overfits without it;
    # each drift readout is decayed in proportion to its share of the loss (lambda_drift / K)
    rel = weights.drift / (k * weights.trans) if weights.trans else 1.0
    for name, p in params:
        if name.startswith(HEADS) and name.endswith(".w"):
            g = (wd if name.startswith("trans.") else wd * rel) * p.data
            p.grad = g if p.grad is None else p.grad + g


def _clip(params, max_norm):
    grads = [p.grad for _, p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


def predict(net, sets, batch_size=16):
    """Inference over a list of sets. Returns dict of stacked numpy outputs."""
    ts, rs, logits, tl = [], [], [], []
    with T.no_grad():
        for i in range(0, len(sets), batch_size):
            x, y, *_ = stack(sets[i:i + batch_size])
            out = net.forward(x, y, training=False)
            ts.append(out.t.data.astype(np.float64))
            rs.append(out.r_numpy())
            logits.append(out.logits.data[..., 0].astype(np.float64))
            tl.append(np.stack([t.data for t in out.trace.t_layers], axis=1).astype(np.float64))
    return {"t": np.concatenate(ts), "r": np.concatenate(rs), "logits": np.concatenate(logits),
            "t_layers": np.concatenate(tl)}


def quick_metrics(net, sets):
    """MRE (deg), MTE, classification accuracy (%) and per-layer drift errors on labeled sets."""
    pred = predict(net, sets)
    re = [geom.rotation_error_iso(r, s.gt.r) for r, s in zip(pred["r"], sets)]
    te = [geom.translation_error_l2(t, s.gt.t) for t, s in zip(pred["t"], sets)]
    labels = np.stack([s.labels for s in sets])
    acc = float(((pred["logits"] > 0) == (labels > 0)).mean() * 100)
    tgt = np.stack([s.gt.t for s in sets])[:, None, :]
    layer_err = np.linalg.norm(pred["t_layers"] - tgt, axis=-1).mean(axis=0)
    return {"mre": float(np.mean(re)), "mte": float(np.mean(te)), "acc": acc,
            "layer_te": layer_err.tolist(), "re": re, "te": te}


def train_loop(train_sets, cfg, weights=None, tc=None, val_sets=None, resume=None, log_fn=None):
    """Train from scratch (or from ``resume``); deterministic given ``tc.seed``.

    Returns (checkpoint, history) where history holds one dict per epoch.
    """
    if not train_sets:
        raise ValueError("empty training set")
    weights = weights or L.LossWeights()
    tc = tc or TrainConfig()
    if resume is not None:
        cfg = resume.config
        params = resume.params
        adam = resume.adam or AdamState(lr=tc.lr)
        step = resume.step
    else:
        params = init_params(cfg, tc.seed)
        adam = AdamState(lr=tc.lr)
        step = 0
    net = DetarNet(cfg, params)
    n = len(train_sets)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    history = []
    start_epoch = step // steps_per_epoch
    for epoch in range(start_epoch, start_epoch + tc.epochs):
        order = np.random.default_rng([tc.seed, epoch]).permutation(n)
        sums = {"total": 0.0, "trans": 0.0, "cls": 0.0, "align": 0.0, "drift": 0.0}
        t0 = time.time()
        nb = 0
        for i in range(0, n, tc.batch_size):
            batch = [train_sets[j] for j in order[i:i + tc.batch_size]]
            x, y, labels, r_gt, t_gt = stack(batch)
            out = net.forward(x, y, training=True)
            total, parts = L.network_losses(out, x, y, labels, r_gt, t_gt, weights)
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss at step {step}: "
                                    + ", ".join(f"{k}={float(v.data):.4g}" for k, v in parts.items()))
            params.zero_grad()
            if total.requires_grad:
                T.backward(total)
            if tc.head_weight_decay:
                _head_decay(params, tc.head_weight_decay, weights, cfg.k_cfd)
            if tc.clip_norm:
                _clip(params, tc.clip_norm)
            adam_step(params, adam, lr=_lr_at(tc, step - start_epoch * steps_per_epoch, total_steps))
            step += 1
            nb += 1
            sums["total"] += float(total.data)
            for k, v in parts.items():
                sums[k] += float(v.data)
            if tc.max_steps is not None and step >= tc.max_steps:
                break
        rec = {"epoch": epoch, "step": step, "seconds": round(time.time() - t0, 3)}
        rec.update({k: v / nb for k, v in sums.items()})
        if val_sets:
            qm = quick_metrics(net, val_sets)
            rec.update({"val_mre": qm["mre"], "val_mte": qm["mte"], "val_acc": qm["acc"]})
        history.append(rec)
        log.info("epoch %s", json.dumps(rec))
        if log_fn is not None:
            log_fn(rec)
        if tc.max_steps is not None and step >= tc.max_steps:
            break
    ckpt = Checkpoint(cfg, params, adam, seed=tc.seed, step=step,
                      extra={"loss_weights": asdict(weights)})
    return ckpt, history


# -- checkpoint file ---------------------------------------------------------------
#
#   "DTRN" | u32 version | u32 len | config JSON | u32 n_records
#   then per record: u32 name_len | name | u8 dtype (0=f32, 1=f64) | u32 rank | rank*u64 dims | payload
# little-endian throughout.

_DT = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DT_TAG = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _records(ckpt):
    for name, p in ckpt.params:
        yield f"param:{name}", p.data
    for name, st in sorted(ckpt.params.bn.items()):
        yield f"bn_mean:{name}", st.mean
        yield f"bn_var:{name}", st.var
    if ckpt.adam is not None:
        for name in sorted(ckpt.adam.m):
            yield f"adam_m:{name}", ckpt.adam.m[name]
            yield f"adam_v:{name}", ckpt.adam.v[name]


def save_checkpoint(path, ckpt):
    header = {"config": ckpt.config.to_dict(), "seed": ckpt.seed, "step": ckpt.step, "extra": ckpt.extra}
    if ckpt.adam is not None:
        a = ckpt.adam
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
    hj = json.dumps(header, sort_keys=True).encode()
    recs = list(_records(ckpt))
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(hj)) + hj
    buf += struct.pack("<I", len(recs))
    for name, arr in recs:
        arr = np.asarray(arr)
        nb = name.encode()
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<BI", _DT_TAG[arr.dtype], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.astype(_DT[_DT_TAG[arr.dtype]]).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(raw):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated)")
        out = raw[pos:pos + k]
        pos += k
        return out

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: corrupt checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} not supported (expected {CKPT_VERSION})")
    try:
        header = json.loads(take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from e
    cfg = DetarConfig(**header["config"])
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nl,) = struct.unpack("<I", take(4))
        name = take(nl).decode()
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DT:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        nbytes = int(np.prod(dims, dtype=np.int64)) * _DT[tag].itemsize
        arrays[name] = np.frombuffer(take(nbytes), dtype=_DT[tag]).reshape(dims).astype(_DT[tag].newbyteorder("="))
    if pos != len(raw):
        raise CheckpointError(f"{path}: corrupt checkpoint ({len(raw) - pos} trailing bytes)")

    ref = init_params(cfg, 0, dtype=np.float32)
    params = Params()
    for name, p in ref:
        key = f"param:{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {arrays[key].shape} vs config {p.shape}")
        params.tensors[name] = T.Tensor(arrays[key], requires_grad=True, name=name, dtype=arrays[key].dtype)
    for name, st in ref.bn.items():
        st.mean = arrays[f"bn_mean:{name}"]
        st.var = arrays[f"bn_var:{name}"]
        params.bn[name] = st
    adam = None
    if "adam" in header:
        adam = AdamState(**header["adam"])
        for key, arr in arrays.items():
            if key.startswith("adam_m:"):
                adam.m[key[7:]] = arr.copy()
            elif key.startswith("adam_v:"):
                adam.v[key[7:]] = arr.copy()
    return Checkpoint(cfg, params, adam, seed=header["seed"], step=header["step"], extra=header.get("extra", {}))
