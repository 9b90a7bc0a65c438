"""Registration metrics, robustness bins, and report assembly."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom

RECALL_RE = 5.0
RECALL_TE = 0.15
DEFAULT_BIN_EDGES = (0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 1.0)


def _errors(errors):
    arr = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("empty error list")
    return arr


def pose_recall(errors, max_re=RECALL_RE, max_te=RECALL_TE):
    """Percentage of (RE deg, TE) pairs with RE <= max_re and TE <= max_te."""
    e = _errors(errors)
    return float(100.0 * np.mean((e[:, 0] <= max_re) & (e[:, 1] <= max_te)))


def pose_map(errors, max_re=RECALL_RE, max_te=RECALL_TE, steps=5):
    """Area under recall vs. jointly scaled thresholds (k/steps of the corner), in percent."""
    e = _errors(errors)
    return float(np.mean([pose_recall(e, k * max_re / steps, k * max_te / steps) for k in range(1, steps + 1)]))


def recall_curve(errors, max_re=RECALL_RE, max_te=RECALL_TE, steps=5):
    return [(k * max_re / steps, k * max_te / steps, pose_recall(errors, k * max_re / steps, k * max_te / steps))
            for k in range(1, steps + 1)]


def classification_metrics(logits, labels):
    """(precision, recall, accuracy) in percent, predicting inlier where logit > 0.

    Precision with no positive predictions, and recall with no positive
    labels, are reported as 0.
    """
    pred = np.asarray(logits).reshape(-1) > 0
    lab = np.asarray(labels).reshape(-1) > 0
    if pred.shape != lab.shape:
        raise ValueError("logits and labels differ in length")
    tp = float(np.sum(pred & lab))
    precision = 100.0 * tp / pred.sum() if pred.any() else 0.0
    recall = 100.0 * tp / lab.sum() if lab.any() else 0.0
    accuracy = 100.0 * float(np.mean(pred == lab))
    return precision, recall, accuracy


def robustness_bins(records, edges=DEFAULT_BIN_EDGES):
    """Mean RE/TE per inlier-ratio bin [lo, hi); the last bin also includes hi."""
    edges = list(edges)
    out = []
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = k == len(edges) - 2
        sel = [r for r in records
               if lo <= r["inlier_ratio"] < hi or (last and r["inlier_ratio"] == hi)]
        if sel:
            out.append({"lo": lo, "hi": hi, "count": len(sel), "empty": False,
                        "mre": float(np.mean([r["re"] for r in sel])),
                        "mte": float(np.mean([r["te"] for r in sel]))})
        else:
            out.append({"lo": lo, "hi": hi, "count": 0, "empty": True, "mre": None, "mte": None})
    return out


@dataclass
class EvalReport:
    records: list
    aggregates: dict = field(default_factory=dict)
    bins: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @classmethod
    def build(cls, records, edges=DEFAULT_BIN_EDGES, steps=5, config=None):
        errs = [(r["re"], r["te"]) for r in records]
        agg = {
            "n": len(records),
            "mre": float(np.mean([r["re"] for r in records])),
            "mte": float(np.mean([r["te"] for r in records])),
            "recall": pose_recall(errs),
            "map": pose_map(errs, steps=steps),
        }
        cls_recs = [r for r in records if r.get("accuracy") is not None]
        if cls_recs:
            for k in ("precision", "cls_recall", "accuracy"):
                agg[k] = float(np.mean([r[k] for r in cls_recs]))
        return cls(records, agg, robustness_bins(records, edges),
                   [list(c) for c in recall_curve(errs, steps=steps)], config or {})

    def recomputed(self):
        return EvalReport.build(self.records, [b["lo"] for b in self.bins] + [self.bins[-1]["hi"]],
                                len(self.curve), self.config)

    def to_dict(self):
        return {"aggregates": self.aggregates, "bins": self.bins, "curve": self.curve,
                "records": self.records, "config": self.config}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def read_json(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["records"], d["aggregates"], d["bins"], d["curve"], d.get("config", {}))

    def write_csv(self, prefix):
        """``<prefix>_recall.csv`` (threshold curve) and ``<prefix>_bins.csv`` (robustness)."""
        prefix = str(prefix)
        with open(prefix + "_recall.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["max_re_deg", "max_te", "recall"])
            w.writerows(self.curve)
        with open(prefix + "_bins.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["inlier_lo", "inlier_hi", "count", "mre", "mte"])
            for b in self.bins:
                w.writerow([b["lo"], b["hi"], b["count"], "" if b["empty"] else b["mre"],
                            "" if b["empty"] else b["mte"]])


def pair_record(cs, transform, logits=None, runtime_ms=None, index=None):
    re = geom.rotation_error_iso(transform.r, cs.gt.r)
    te = geom.translation_error_l2(transform.t, cs.gt.t)
    rec = {"index": index, "re": re, "te": te, "inlier_ratio": cs.inlier_ratio,
           "precision": None, "cls_recall": None, "accuracy": None, "runtime_ms": runtime_ms}
    if logits is not None and cs.labels is not None:
        p, r, a = classification_metrics(logits, cs.labels)
        rec.update(precision=p, cls_recall=r, accuracy=a)
    if not (math.isfinite(re) and math.isfinite(te)):
        raise ValueError(f"non-finite error for pair {index}")
    return rec


def evaluate(solver, sets, edges=DEFAULT_BIN_EDGES, steps=5, config=None, timing=True):
    """Run ``solver(cs) -> (RigidTransform, logits_or_None)`` on every labeled set."""
    records = []
    for i, cs in enumerate(sets):
        if cs.gt is None:
            raise ValueError(f"set {i} has no ground truth")
        t0 = time.perf_counter()
        transform, logits = solver(cs)
        ms = (time.perf_counter() - t0) * 1e3 if timing else None
        records.append(pair_record(cs, transform, logits, ms, i))
    return EvalReport.build(records, edges, steps, config)


# -- solver adapters ----------------------------------------------------------------

def oracle_solver(cs):
    return cs.gt, None


def identity_solver(cs):
    return geom.RigidTransform.identity(), None


def net_solver(net):
    from . import tensor as T

    def solve(cs):
        with T.no_grad():
            out = net.forward(cs.x[None], cs.y[None], training=False)
        return (geom.RigidTransform(out.r_numpy()[0], out.t.data[0].astype(np.float64)),
                out.logits.data[0, :, 0].astype(np.float64))

    return solve


def baseline_solver(name, **kw):
    from . import baselines as B

    if name == "ransac":
        def solve(cs):
            res = B.ransac(cs, **kw)
            return res.transform, np.where(res.mask, 1.0, -1.0)
    elif name == "icp":
        def solve(cs):
            return B.icp(cs.x, cs.y, **kw).transform, None
    elif name == "procrustes":
        def solve(cs):
            try:
                return B.procrustes_all(cs), None
            except geom.DegenerateError:
                return geom.RigidTransform.identity(), None
    elif name == "oracle":
        solve = oracle_solver
    elif name == "identity":
        solve = identity_solver
    else:
        raise ValueError(f"unknown baseline {name!r}")
    return solve
