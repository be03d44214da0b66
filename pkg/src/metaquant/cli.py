"""Command-line entry point: ``metaquant {train,eval,search,export,metrics}``.

Results go to stdout as one JSON object; failures go to stderr as
``{"error": <kind>, "message": <text>}`` with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import statistics
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import build_dataset
from .errors import MetaQuantError
from .runner import RunDir, read_metrics, run_stage
from .subnet import hessian_batch, layer_sensitivities, search, write_candidates_csv
from .trainer import evaluate_assignment, evaluate_fixed, evaluate_random


class _JsonErrorParser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, 2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _load_with_data(path, config=None):
    ck = load_checkpoint(path)
    if config:
        cfg = RunConfig.load(config)
    elif ck.run_config:
        cfg = RunConfig.from_text(ck.run_config)
    else:
        raise MetaQuantError("checkpoint carries no run config; pass --config")
    return ck, cfg, build_dataset(cfg.data)


def _parse_assignment(text: str):
    try:
        return tuple(int(t) for t in text.split("-"))
    except ValueError:
        raise MetaQuantError(f"assignment must be dash-separated integers, got {text!r}") from None


# -- commands ---------------------------------------------------------------------


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    run_dir = RunDir(cfg.run.out_dir)
    resume = load_checkpoint(args.resume).net if args.resume else None
    net, rows = run_stage(cfg, args.stage, resume=resume, run_dir=run_dir)
    last = rows[-1]
    _emit({"stage": args.stage, "checkpoint": run_dir.ckpt(args.stage), "run_dir": run_dir.path,
           "final": {k: last[k] for k in last}})


def cmd_eval(args):
    ck, cfg, data = _load_with_data(args.ckpt, args.config)
    net = ck.net
    bs = cfg.train.eval_batch_size
    if args.bits is not None:
        _emit({"mode": "fixed", "bits": args.bits, "top1": evaluate_fixed(net, data, args.bits, bs)})
    elif args.assignment is not None:
        a = _parse_assignment(args.assignment)
        _emit({"mode": "assignment", "assignment": "-".join(map(str, a)),
               "top1": evaluate_assignment(net, data, a, bs)})
    else:
        if args.trials < 1:
            raise MetaQuantError("--trials must be >= 1")
        accs = [evaluate_random(net, data, net.bits, seed=cfg.run.seed + t, batch_size=bs)
                for t in range(args.trials)]
        _emit({"mode": "random", "trials": args.trials, "top1": statistics.fmean(accs),
               "top1_std": statistics.pstdev(accs), "per_trial": accs})


def _sensitivities(path, net, data, cfg):
    """Per-unit eigenvalues, cached next to the checkpoint and keyed by its hash."""
    with open(path, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    cache = path + ".sens.json"
    sc = cfg.search
    key = f"{digest}:{sc.hessian_batch}:{sc.power_iters}:{sc.power_tol}:{cfg.run.seed}"
    if os.path.exists(cache):
        with open(cache) as f:
            saved = json.load(f)
        if saved.get("key") == key:
            return np.array(saved["values"])
    x, y = hessian_batch(data, sc.hessian_batch, cfg.run.seed)
    vals, conv = layer_sensitivities(net, x, y, sc.power_iters, sc.power_tol, cfg.run.seed)
    with open(cache, "w") as f:
        json.dump({"key": key, "values": [float(v) for v in vals], "converged": conv}, f)
    return vals


def cmd_search(args):
    ck, cfg, data = _load_with_data(args.ckpt, args.config)
    sc = cfg.search
    sens = _sensitivities(args.ckpt, ck.net, data, cfg)
    recs = search(ck.net, data, args.avg_bits, args.top_k, sensitivities=sens, descending=sc.descending,
                  cap=sc.enum_cap, samples=sc.sample_count, seed=cfg.run.seed,
                  batch_size=cfg.train.eval_batch_size)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), f"search_avg{args.avg_bits}.csv")
    write_candidates_csv(out, recs)
    _emit({"avg_bits": args.avg_bits, "csv": out, "sensitivities": [float(v) for v in sens],
           "candidates": [{"assignment": r.assignment_str, "total_bits": r.total_bits, "score": r.score,
                           "top1": r.top1_accuracy} for r in recs]})


def cmd_export(args):
    if not args.deploy:
        raise MetaQuantError("export writes deploy checkpoints only; pass --deploy")
    ck = load_checkpoint(args.ckpt)
    out = args.out or os.path.splitext(args.ckpt)[0] + (".deploy4.ckpt" if args.pack else ".deploy.ckpt")
    n = save_checkpoint(ck.net, out, "deploy", pack=args.pack, run_config=ck.run_config)
    _emit({"checkpoint": out, "bytes": n, "source_bytes": os.path.getsize(args.ckpt), "packed": args.pack})


def cmd_metrics(args):
    rd = RunDir(args.run_dir)
    if not os.path.exists(rd.metrics_path):
        raise MetaQuantError(f"no metrics.csv in {args.run_dir}")
    rows = read_metrics(rd.metrics_path)
    last = {}
    for r in rows:
        last[f"stage{r['stage']}"] = r
    _emit({"run_dir": args.run_dir, "epochs": len(rows), "final": last})


def build_parser() -> argparse.ArgumentParser:
    p = _JsonErrorParser(prog="metaquant", description="Train, evaluate and search mixed-precision meta-networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_JsonErrorParser)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--resume", help="checkpoint of the previous stage")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", help="override the config stored in the checkpoint")
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--bits", type=int)
    g.add_argument("--random", action="store_true")
    g.add_argument("--assignment")
    e.add_argument("--trials", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("search", help="rank and evaluate sub-nets at an average bit budget")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--avg-bits", type=float, required=True)
    s.add_argument("--top-k", type=int, default=5)
    s.add_argument("--out", help="candidate CSV path")
    s.set_defaults(func=cmd_search)

    x = sub.add_parser("export", help="write an inference-only checkpoint")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--deploy", action="store_true")
    x.add_argument("--pack", action="store_true", help="pack two 4-bit codes per byte")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)

    m = sub.add_parser("metrics", help="summarize a run directory")
    m.add_argument("--run-dir", required=True)
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args.func(args)
    except MetaQuantError as e:
        _fail(type(e).__name__, str(e))
    except OSError as e:
        _fail("IOError", str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
