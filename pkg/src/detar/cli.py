"""Command-line entry point: gen, train, eval, register."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from . import eval as E
from . import geom
from . import tensor as T
from . import train as TR
from .loss import LossWeights
from .nn import DetarConfig, DetarNet

log = logging.getLogger("detar")

SCHEMA_DIR = Path(__file__).parent / "schemas"

SECTIONS = {
    "model": DetarConfig.desk,
    "loss": LossWeights,
    "gen": D.GenSpec,
    "train": TR.TrainConfig,
}
EXTRA_DEFAULTS = {
    "gen.grid": [0.3, 0.4, 0.5, 0.6, 0.7],
    "gen.train": 256,
    "gen.val": 32,
    "gen.test": 64,
    "eval.steps": 5,
    "eval.bin_edges": list(E.DEFAULT_BIN_EDGES),
    "ransac.iters": 1000,
    "ransac.thresh": D.TAU_LABEL,
}


def default_config():
    """Flat dotted-key defaults for every section."""
    flat = {}
    for sec, factory in SECTIONS.items():
        for k, v in dataclasses.asdict(factory()).items():
            flat[f"{sec}.{k}"] = list(v) if isinstance(v, tuple) else v
    flat.update(EXTRA_DEFAULTS)
    return flat


def build_config(path=None, overrides=None):
    cfg = default_config()
    if path:
        loaded = json.loads(Path(path).read_text())
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    validate_config(cfg)
    return cfg


def section(cfg, name):
    prefix = name + "."
    vals = {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}
    cls = {"model": DetarConfig, "loss": LossWeights, "gen": D.GenSpec, "train": TR.TrainConfig}[name]
    fields = {f.name for f in dataclasses.fields(cls)}
    vals = {k: v for k, v in vals.items() if k in fields}
    if name == "gen":
        return D.GenSpec.from_dict(vals)
    return cls(**vals)


def validate_config(cfg):
    section(cfg, "model").validate()
    section(cfg, "loss")
    section(cfg, "gen").validate()
    tc = section(cfg, "train")
    if tc.epochs < 1 or tc.batch_size < 1 or tc.lr <= 0:
        raise ValueError("train.epochs, train.batch_size must be >= 1 and train.lr > 0")
    if tc.head_weight_decay < 0:
        raise ValueError("train.head_weight_decay must be >= 0")
    if not cfg["gen.grid"] or any(not 0 <= g <= 1 for g in cfg["gen.grid"]):
        raise ValueError("gen.grid must be nonempty ratios in [0, 1]")


def n_workers():
    cap = os.environ.get("DETAR_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = max(1, min(n, int(cap)))
    return n


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1))


# -- commands ------------------------------------------------------------------------

def cmd_gen(args, cfg):
    spec = section(cfg, "gen")
    counts = {"train": cfg["gen.train"], "val": cfg["gen.val"], "test": cfg["gen.test"]}
    m = D.make_split(args.out, spec, cfg["gen.grid"], counts, args.seed)
    m["config"] = cfg
    _write_json(Path(args.out) / "manifest.json", m)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    print(f"wrote {sum(counts.values())} sets to {args.out} (manifest sha256 {digest[:16]})")
    return 0


def cmd_train(args, cfg):
    manifest = D.load_manifest(args.data)
    train_sets = D.load_split(manifest, "train")
    val_sets = D.load_split(manifest, "val")
    # the model is sized by the data it trains on
    cfg["model.n_corr"] = manifest["spec"]["n_corr"]
    model = section(cfg, "model")
    tc = dataclasses.replace(section(cfg, "train"), seed=args.seed)
    resume = TR.load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    svd_before = geom.SVD_CALLS[0]

    with open(log_path, "a") as logf:
        def log_fn(rec):
            logf.write(json.dumps(rec) + "\n")
            logf.flush()
            print(f"epoch {rec['epoch']}: loss {rec['total']:.4f}"
                  + (f"  val MRE {rec['val_mre']:.3f}  MTE {rec['val_mte']:.4f}" if "val_mre" in rec else ""))

        ckpt, _ = TR.train_loop(train_sets, model, section(cfg, "loss"), tc, val_sets or None,
                                resume=resume, log_fn=log_fn)
    ckpt.extra["run_config"] = cfg
    ckpt.extra["svd_calls"] = geom.SVD_CALLS[0] - svd_before
    TR.save_checkpoint(out / "model.dtrn", ckpt)
    _write_json(out / "train_summary.json", {"step": ckpt.step, "svd_calls": ckpt.extra["svd_calls"],
                                             "config": cfg})
    print(f"checkpoint written to {out / 'model.dtrn'} at step {ckpt.step}")
    return 0


def _eval_parallel(solver, sets, cfg):
    workers = n_workers()
    if workers == 1:
        return E.evaluate(solver, sets, cfg["eval.bin_edges"], cfg["eval.steps"], cfg)
    chunks = [sets[i::workers] for i in range(workers)]
    with ThreadPoolExecutor(workers) as ex:
        parts = list(ex.map(lambda c: E.evaluate(solver, c, timing=True).records, chunks))
    records = [None] * len(sets)
    for w, recs in enumerate(parts):
        for j, r in enumerate(recs):
            idx = w + j * workers
            r["index"] = idx
            records[idx] = r
    return E.EvalReport.build(records, cfg["eval.bin_edges"], cfg["eval.steps"], cfg)


def cmd_eval(args, cfg):
    manifest = D.load_manifest(args.data)
    sets = D.load_split(manifest, args.split)
    if not sets:
        raise ValueError(f"split {args.split!r} is empty")
    if args.checkpoint:
        solver = E.net_solver(TR.load_checkpoint(args.checkpoint).net())
    elif args.baseline == "ransac":
        solver = E.baseline_solver("ransac", iters=cfg["ransac.iters"], inlier_thresh=cfg["ransac.thresh"],
                                   seed=args.seed)
    else:
        solver = E.baseline_solver(args.baseline)
    report = _eval_parallel(solver, sets, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "curves")
    a = report.aggregates
    print(f"n={a['n']}  MRE {a['mre']:.3f} deg  MTE {a['mte']:.4f}  recall {a['recall']:.1f}  mAP {a['map']:.1f}"
          + (f"  acc {a['accuracy']:.1f}" if "accuracy" in a else ""))
    return 0


def cmd_register(args, cfg):
    ckpt = TR.load_checkpoint(args.checkpoint)
    net = ckpt.net()
    cs = D.read_set(args.input)
    with T.no_grad():
        out = net.forward(cs.x[None], cs.y[None], training=False)
    logits = out.logits.data[0, :, 0].astype(np.float64)
    prob = 1 / (1 + np.exp(-np.clip(logits, -60, 60)))
    result = {
        "r": out.r_numpy()[0].tolist(),
        "t": out.t.data[0].astype(np.float64).tolist(),
        "probabilities": prob.tolist(),
        "weights": out.w.data[0].astype(np.float64).tolist(),
        "n": cs.n,
        "input": str(args.input),
        "config": cfg,
    }
    _write_json(args.out, result)
    print(f"t = {np.round(result['t'], 4).tolist()}  inliers(p>0.5) = {int((prob > 0.5).sum())}/{cs.n}")
    return 0


# -- parser ------------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any dotted config key, e.g. --set model.channels=32")


def build_parser():
    ap = argparse.ArgumentParser(prog="detar", description="decoupled rigid registration toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate synthetic train/val/test correspondence sets")
    _add_common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-corr", type=int)
    g.add_argument("--inlier-ratio", type=float, help="use a single inlier ratio instead of the grid")
    g.add_argument("--noise", type=float)
    g.add_argument("--count", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--outlier", choices=["uniform", "shuffle"])
    g.add_argument("--source", choices=["cube", "clusters"])

    t = sub.add_parser("train", help="train the network")
    _add_common(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--t-head", choices=["regress", "svd"])
    t.add_argument("--r-head", choices=["svd", "regress"])
    t.add_argument("--no-ceu", action="store_true", help="coordinate-only correspondence features")
    t.add_argument("--blocks", choices=["sca", "cn"])
    t.add_argument("--channels", type=int)
    t.add_argument("--k-cfd", type=int)
    t.add_argument("--m-sca", type=int)
    t.add_argument("--lambdas", help="loss weights 'trans,cls,align,drift'")

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    _add_common(e)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--baseline", choices=["ransac", "icp", "procrustes", "oracle", "identity"])
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)

    r = sub.add_parser("register", help="register one CRSP file")
    _add_common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)
    return ap


def _overrides(args):
    ov = {}
    for item in args.set:
        k, _, v = item.partition("=")
        if not _:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            ov[k] = json.loads(v)
        except json.JSONDecodeError:
            ov[k] = v
    if args.cmd == "gen":
        ov.update({"gen.n_corr": args.n_corr, "gen.noise_sigma": args.noise,
                   "gen.outlier": args.outlier, "gen.source": args.source})
        if args.n_corr:
            ov["model.n_corr"] = args.n_corr
        if args.inlier_ratio is not None:
            ov["gen.grid"] = [args.inlier_ratio]
            ov["gen.inlier_ratio"] = args.inlier_ratio
        if args.count:
            ov.update({"gen.train": args.count[0], "gen.val": args.count[1], "gen.test": args.count[2]})
    elif args.cmd == "train":
        ov.update({"train.epochs": args.epochs, "model.t_head": args.t_head, "model.r_head": args.r_head,
                   "model.blocks": args.blocks, "model.channels": args.channels, "model.k_cfd": args.k_cfd,
                   "model.m_sca": args.m_sca})
        if args.no_ceu:
            ov["model.ceu"] = False
        if args.lambdas:
            lw = LossWeights.parse(args.lambdas)
            ov.update({f"loss.{k}": v for k, v in dataclasses.asdict(lw).items()})
    ov["train.seed"] = args.seed
    return ov


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, _overrides(args))
        cmd = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "register": cmd_register}[args.cmd]
        return cmd(args, cfg)
    except (ValueError, OSError, TR.TrainingError) as e:
        print(f"detar {args.cmd}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
