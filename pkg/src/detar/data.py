"""Synthetic correspondence sets, their binary format, and dataset manifests."""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import RigidTransform, random_rotation

log = logging.getLogger(__name__)

MAGIC = b"CRSP"
VERSION = 1
TAU_LABEL = 0.1


class FormatError(ValueError):
    pass


@dataclass
class CorrespondenceSet:
    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray | None = None
    gt: RigidTransform | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        if self.x.ndim != 2 or self.x.shape[1] != 3 or self.x.shape != self.y.shape:
            raise ValueError(f"x and y must be matching N×3 arrays, got {self.x.shape}, {self.y.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
            if self.labels.shape[0] != self.n:
                raise ValueError("label count does not match N")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def inlier_ratio(self):
        if self.labels is not None:
            return float(self.labels.mean())
        return self.meta.get("inlier_ratio")

    def permuted(self, perm):
        labels = None if self.labels is None else self.labels[perm]
        return CorrespondenceSet(self.x[perm], self.y[perm], labels, self.gt, dict(self.meta))

    def to_json(self):
        d = {"x": self.x.tolist(), "y": self.y.tolist(), "meta": self.meta}
        if self.labels is not None:
            d["labels"] = self.labels.tolist()
        if self.gt is not None:
            d["gt"] = {"r": self.gt.r.tolist(), "t": self.gt.t.tolist()}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        gt = None
        if "gt" in d:
            gt = RigidTransform(np.array(d["gt"]["r"], dtype=np.float32).astype(np.float64),
                                np.array(d["gt"]["t"], dtype=np.float32).astype(np.float64))
        return cls(np.array(d["x"]), np.array(d["y"]), d.get("labels"), gt, d.get("meta", {}))


def label_inliers(x, y, gt, tau=TAU_LABEL):
    """m_i = 1 iff |y_i - (R x_i + t)| <= tau."""
    res = np.asarray(y, np.float64) - gt.apply(np.asarray(x, np.float64))
    return (np.linalg.norm(res, axis=1) <= tau).astype(np.uint8)


@dataclass
class GenSpec:
    n_corr: int = 512
    inlier_ratio: float = 0.5
    noise_sigma: float = 0.01
    rot_deg: tuple = (0.0, 45.0)
    trans_range: tuple = (0.0, 1.0)
    source: str = "cube"  # cube | clusters
    outlier: str = "uniform"  # uniform | shuffle
    tau_label: float = TAU_LABEL

    def validate(self):
        if self.n_corr < 3:
            raise ValueError("n_corr must be at least 3")
        if not 0 <= self.inlier_ratio <= 1:
            raise ValueError("inlier_ratio must be in [0, 1]")
        for lo, hi in (self.rot_deg, self.trans_range):
            if lo > hi:
                raise ValueError("empty range")
        if self.source not in ("cube", "clusters"):
            raise ValueError(f"unknown source distribution {self.source!r}")
        if self.outlier not in ("uniform", "shuffle"):
            raise ValueError(f"unknown outlier model {self.outlier!r}")
        if self.noise_sigma < 0 or self.tau_label <= 0:
            raise ValueError("noise_sigma must be >= 0 and tau_label > 0")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("rot_deg", "trans_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _source_points(rng, spec):
    n = spec.n_corr
    if spec.source == "cube":
        return rng.uniform(-0.5, 0.5, size=(n, 3))
    centers = rng.uniform(-0.4, 0.4, size=(4, 3))
    which = rng.integers(0, 4, size=n)
    return centers[which] + rng.normal(scale=0.08, size=(n, 3))


def generate(spec, seed):
    """Draw one correspondence set; labels come from the distance rule, not from construction."""
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.n_corr
    r = random_rotation(rng, max_deg=spec.rot_deg[1], min_deg=spec.rot_deg[0])
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(*spec.trans_range)
    # store gt at file precision so relabeling a loaded set is exact
    gt = RigidTransform(r.astype(np.float32).astype(np.float64), t.astype(np.float32).astype(np.float64))

    x = _source_points(rng, spec)
    clean = x @ gt.r.T + gt.t
    y = clean + rng.normal(scale=spec.noise_sigma, size=(n, 3)) if spec.noise_sigma > 0 else clean.copy()
    n_in = int(round(spec.inlier_ratio * n))
    out_idx = rng.permutation(n)[n_in:]
    if len(out_idx):
        if spec.outlier == "uniform":
            lo, hi = clean.min(axis=0), clean.max(axis=0)
            y[out_idx] = rng.uniform(lo, hi, size=(len(out_idx), 3))
        else:
            y[out_idx] = y[out_idx[rng.permutation(len(out_idx))]]
    if spec.tau_label > 0 and n_in < 3:
        log.warning("spec yields fewer than 3 inliers (%d)", n_in)
    x32 = x.astype(np.float32)
    y32 = y.astype(np.float32)
    labels = label_inliers(x32, y32, gt, spec.tau_label)
    meta = {"inlier_ratio": spec.inlier_ratio, "noise_sigma": spec.noise_sigma, "seed": int(seed),
            "tau_label": spec.tau_label, "actual_inlier_ratio": float(labels.mean())}
    return CorrespondenceSet(x32, y32, labels, gt, meta)


# -- CRSP binary format --------------------------------------------------------
#
#   "CRSP" | u32 version | u64 N | x: N*3 f32 | y: N*3 f32
#   | u8 has_labels [| N u8] | u8 has_gt [| 9 f32 R row-major | 3 f32 t]
#   | u32 meta_len | meta JSON (utf-8)
# all little-endian.

def write_set(path, cs):
    buf = bytearray(MAGIC)
    buf += struct.pack("<IQ", VERSION, cs.n)
    buf += cs.x.astype("<f4").tobytes() + cs.y.astype("<f4").tobytes()
    if cs.labels is None:
        buf += b"\x00"
    else:
        buf += b"\x01" + cs.labels.astype(np.uint8).tobytes()
    if cs.gt is None:
        buf += b"\x00"
    else:
        buf += b"\x01" + np.concatenate([cs.gt.r.ravel(), cs.gt.t]).astype("<f4").tobytes()
    meta = json.dumps(cs.meta, sort_keys=True).encode()
    buf += struct.pack("<I", len(meta)) + meta
    Path(path).write_bytes(bytes(buf))


def read_set(path):
    raw = Path(path).read_bytes()
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(raw):
            raise FormatError(f"{path}: truncated file")
        chunk = raw[pos:pos + k]
        pos += k
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, n = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported CRSP version {version} (expected {VERSION})")
    if n < 3:
        raise FormatError(f"{path}: invalid content, N={n} < 3")
    x = np.frombuffer(take(12 * n), dtype="<f4").reshape(n, 3).astype(np.float32)
    y = np.frombuffer(take(12 * n), dtype="<f4").reshape(n, 3).astype(np.float32)
    labels = None
    if take(1) == b"\x01":
        labels = np.frombuffer(take(n), dtype=np.uint8).copy()
    gt = None
    if take(1) == b"\x01":
        g = np.frombuffer(take(48), dtype="<f4").astype(np.float64)
        gt = RigidTransform(g[:9].reshape(3, 3), g[9:])
    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt metadata") from e
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return CorrespondenceSet(x, y, labels, gt, meta)


# -- splits ----------------------------------------------------------------------

SPLITS = ("train", "val", "test")
_SPLIT_STRIDE = 1_000_000


def split_seed(seed, split_index, i):
    return seed * 10 * _SPLIT_STRIDE + split_index * _SPLIT_STRIDE + i


def make_split(out_dir, spec, grid, counts, seed):
    """Generate train/val/test sets cycling through ``grid`` inlier ratios.

    Returns the manifest dict, also written to ``out_dir/manifest.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(counts, int):
        counts = {s: counts for s in SPLITS}
    grid = [float(g) for g in grid]
    manifest = {"version": 1, "seed": seed, "spec": spec.to_dict(), "grid": grid, "splits": {}}
    for k, split in enumerate(SPLITS):
        count = counts.get(split, 0)
        if count < 0 or count >= _SPLIT_STRIDE:
            raise ValueError(f"bad count for {split}: {count}")
        entries = []
        for i in range(count):
            s = split_seed(seed, k, i)
            sub = dataclasses.replace(spec, inlier_ratio=grid[i % len(grid)])
            cs = generate(sub, s)
            rel = f"{split}/{i:05d}.crsp"
            (out_dir / split).mkdir(exist_ok=True)
            write_set(out_dir / rel, cs)
            entries.append({"path": rel, "seed": s, "inlier_ratio": sub.inlier_ratio,
                            "actual_inlier_ratio": cs.meta["actual_inlier_ratio"]})
        manifest["splits"][split] = entries
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    m = json.loads(path.read_text())
    m["root"] = str(path.parent)
    return m


def load_split(manifest, split):
    root = Path(manifest["root"])
    return [read_set(root / e["path"]) for e in manifest["splits"].get(split, [])]


def regenerate(manifest, split, i):
    """Rebuild entry ``i`` of ``split`` from its recorded seed."""
    spec = GenSpec.from_dict(manifest["spec"])
    e = manifest["splits"][split][i]
    return generate(dataclasses.replace(spec, inlier_ratio=e["inlier_ratio"]), e["seed"])


def stack(sets):
    """Batch arrays (x, y, labels, R_gt, t_gt) from a list of equal-N sets."""
    x = np.stack([s.x for s in sets])
    y = np.stack([s.y for s in sets])
    labels = None
    if all(s.labels is not None for s in sets):
        labels = np.stack([s.labels for s in sets]).astype(np.float64)
    r = t = None
    if all(s.gt is not None for s in sets):
        r = np.stack([s.gt.r for s in sets])
        t = np.stack([s.gt.t for s in sets])
    return x, y, labels, r, t
