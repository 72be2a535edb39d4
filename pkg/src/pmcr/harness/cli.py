"""``pmcr`` command line: gen, train, eval, ablate, init-config, demo."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from pmcr.core import Rng, read_tensor, write_tensor
from pmcr.crr import masked_slic
from pmcr.errors import NonConvergence, PMCRError
from pmcr.harness.archive import load_model
from pmcr.harness.config import TrainConfig
from pmcr.harness.evaluate import evaluate_model
from pmcr.harness.synthetic import Dataset, SyntheticTaskSpec, default_task, generate_dataset
from pmcr.harness.train import ablate, train
from pmcr.pcm import sinkhorn


def _cmd_gen(args) -> int:
    spec = SyntheticTaskSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8"))) if args.spec else default_task()
    ds = generate_dataset(spec, Rng(args.seed), args.out)
    print(f"wrote {len(ds.scans)} scans to {args.out}")
    return 0


def _cmd_init_config(args) -> int:
    cfg = TrainConfig()
    cfg.save(args.out)
    print(f"wrote default config to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    cfg.output_dir = args.out
    if args.data:
        cfg.data_dir = args.data
    res = train(cfg, evaluate=args.evaluate)
    print(f"trained {cfg.iterations} iterations -> {args.out}")
    if res.report is not None:
        print(f"novel-class dice {res.report['mean_dice']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    model, flags, _ = load_model(Path(args.model) / "model" if (Path(args.model) / "model").exists() else args.model)
    ds = Dataset.load(args.data)
    classes = [int(c) for c in args.classes.split(",")] if args.classes else None
    report = evaluate_model(model, ds, flags, args.chunks, classes, supports=args.supports)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    print(f"mean dice {report['mean_dice']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = TrainConfig.load(args.config)
    if args.out:
        cfg.output_dir = args.out
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = ablate(cfg, seeds)
    for name, v in summary.items():
        print(f"{name:10s} {v['mean_dice']:.4f}  {' '.join(f'{x:.4f}' for x in v['per_seed'])}")
    return 0


def _cmd_demo_sinkhorn(args) -> int:
    cost = read_tensor(args.cost)
    u, v = read_tensor(args.u).reshape(-1), read_tensor(args.v).reshape(-1)
    try:
        plan = sinkhorn(1.0 - cost, u / u.sum(), v / v.sum(), args.mu, args.iters, args.tol)
    except NonConvergence as exc:
        print(f"did not converge: {exc}", file=sys.stderr)
        plan = exc.plan
        status = 1
    else:
        status = 0
    if args.out:
        write_tensor(plan.T, args.out)
    print(json.dumps({"plan": plan.T.tolist(), "iters": plan.iters, "violation": plan.violation,
                      "log_domain": plan.log_domain}))
    return status


def _cmd_demo_slic(args) -> int:
    feats = torch.as_tensor(read_tensor(args.features), dtype=torch.float64)
    if feats.ndim != 2:
        print("features must be a D x N matrix", file=sys.stderr)
        return 2
    cents = masked_slic(feats, args.seeds, args.iters)
    if args.out:
        write_tensor(cents.centroids.detach(), args.out)
    print(json.dumps({"centroids": cents.centroids.detach().numpy().tolist()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmcr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic dataset")
    g.add_argument("--spec", help="task spec JSON (default task when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gen)

    c = sub.add_parser("init-config", help="write the default training config")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=_cmd_init_config)

    t = sub.add_parser("train", help="episodic training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory (overrides config)")
    t.add_argument("--evaluate", action="store_true", help="score novel classes after training")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="chunked volumetric evaluation")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--chunks", type=int, default=3)
    e.add_argument("--classes", help="comma separated class ids (default: novel classes)")
    e.add_argument("--supports", choices=("all", "first"), default="all",
                   help="every test scan supports every other, or only the first one")
    e.add_argument("--report")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate", help="train and score the module ablations")
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.add_argument("--seeds", default="0,1,2")
    a.set_defaults(fn=_cmd_ablate)

    d = sub.add_parser("demo", help="run one primitive on files")
    dsub = d.add_subparsers(dest="demo", required=True)
    s = dsub.add_parser("sinkhorn")
    s.add_argument("--cost", required=True, help="S x S cost matrix (.pmt)")
    s.add_argument("--u", required=True)
    s.add_argument("--v", required=True)
    s.add_argument("--mu", type=float, default=0.1)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_demo_sinkhorn)
    sl = dsub.add_parser("slic")
    sl.add_argument("--features", required=True, help="D x N foreground features (.pmt)")
    sl.add_argument("--seeds", type=int, required=True)
    sl.add_argument("--iters", type=int, default=5)
    sl.add_argument("--out")
    sl.set_defaults(fn=_cmd_demo_slic)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except PMCRError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
