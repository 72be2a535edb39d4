"""Episodic SGD training and the ablation driver."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from pmcr.core import Episode, Rng, write_tensor
from pmcr.errors import EmptyForeground, NonFiniteLoss
from pmcr.harness.archive import save_model
from pmcr.harness.config import ABLATIONS, TrainConfig
from pmcr.harness.evaluate import dice_score, evaluate_model, miou
from pmcr.harness.model import PMCRModel, run_episode
from pmcr.harness.synthetic import Dataset, generate_dataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["episode", "class_id", "dice", "miou", "loss_se", "loss_be", "loss_dc", "loss_all",
                  "iteration", "wall_clock_ms"]


def learning_rate(lr0: float, iteration: int, decay: float = 0.95, every: int = 1000) -> float:
    return lr0 * decay ** (iteration // every)


def sample_episode(dataset: Dataset, rng: Rng, classes: Sequence[int], n_shots: int = 1,
                   split: str = "train") -> Episode:
    """Support and query slices from different scans at matching relative depth."""
    scans = dataset.split(split)
    c = int(classes[rng.integers(0, len(classes))])
    order = rng.permutation(len(scans))
    if len(scans) > n_shots:
        picks = [int(i) for i in order[: n_shots + 1]]
    else:
        picks = [int(order[0])] + [int(i) for i in rng.integers(0, len(scans), n_shots)]
    q = scans[picks[0]]
    t_q = int(rng.integers(0, q.depth))
    rel = t_q / max(q.depth - 1, 1)
    s_imgs, s_masks, s_ref = [], [], []
    for k in picks[1:]:
        s = scans[k]
        t_s = int(np.clip(round(rel * (s.depth - 1)) + int(rng.integers(-1, 2)), 0, s.depth - 1))
        s_imgs.append(s.images[t_s])
        s_masks.append(s.masks[t_s])
        s_ref.append((s.name, t_s))
    return Episode(s_imgs, s_masks, q.images[t_q], q.masks[t_q], c,
                   meta={"query": (q.name, t_q), "support": s_ref})


@dataclass
class TrainResult:
    model: PMCRModel
    rows: List[dict]
    out_dir: Optional[Path] = None
    skipped: int = 0
    report: Optional[dict] = None


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)  # RFC 4180: CRLF line ends, minimal quoting
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _dump_failure(out: Optional[Path], e: Episode, losses: dict, it: int) -> Optional[Path]:
    if out is None:
        return None
    d = out / f"failure_it{it}"
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(e.query_image, d / "query_image.pmt")
    for k, (img, m) in enumerate(zip(e.support_images, e.support_masks)):
        write_tensor(img, d / f"support{k}_image.pmt")
        write_tensor(np.asarray(m, dtype=np.uint8), d / f"support{k}_mask.pmt")
    (d / "losses.json").write_text(json.dumps({k: float(v) for k, v in losses.items()}, indent=2))
    return d


def load_or_generate(cfg: TrainConfig) -> Dataset:
    if cfg.data_dir and (Path(cfg.data_dir) / "manifest.json").exists():
        return Dataset.load(cfg.data_dir)
    ds = generate_dataset(cfg.task, Rng(cfg.data_seed))
    if cfg.data_dir:
        ds.save(cfg.data_dir)
    return ds


def train(cfg: TrainConfig, dataset: Optional[Dataset] = None, steps: Optional[int] = None,
          evaluate: bool = False) -> TrainResult:
    """Episodic training on base classes; writes metrics, archive and config when ``output_dir`` is set.

    ``steps`` overrides ``cfg.iterations`` (``0`` returns the initial model).
    """
    cfg.validate()
    torch.set_num_threads(1)
    hp = cfg.hyperparams
    ds = dataset if dataset is not None else load_or_generate(cfg)
    base = list(ds.spec.base_classes)
    class_ids = [c.class_id for c in ds.spec.classes]
    model = PMCRModel(hp, class_ids, seed=cfg.seed)
    rng = Rng(cfg.seed).child(10)
    params = [p for p in model.parameters()]
    opt = torch.optim.SGD(params, lr=hp.lr, momentum=hp.momentum)
    n_steps = cfg.iterations if steps is None else steps
    out = Path(cfg.output_dir) if cfg.output_dir else None
    rows: List[dict] = []
    skipped = 0
    it = 0
    while it < n_steps:
        e = sample_episode(ds, rng, base, hp.n_shots)
        t0 = time.perf_counter()
        try:
            res = run_episode(e, model, cfg.flags, train=True)
        except EmptyForeground:
            skipped += 1
            continue
        losses = res.losses
        values = {k: float(v.detach()) for k, v in losses.items()}
        if not all(math.isfinite(v) for v in values.values()):
            where = _dump_failure(out, e, values, it)
            raise NonFiniteLoss(f"non-finite loss at iteration {it}; episode dumped to {where}")
        lr = learning_rate(hp.lr, it, hp.lr_decay, hp.lr_decay_every)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad()
        losses["all"].backward()
        if hp.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, hp.grad_clip)
        opt.step()
        ms = (time.perf_counter() - t0) * 1000.0 if cfg.record_timing else 0.0
        if it % cfg.log_every == 0:
            gt = (np.asarray(e.query_mask) == e.class_id).astype(np.int64)
            rows.append({
                "episode": it, "class_id": e.class_id,
                "dice": dice_score(res.pred, gt), "miou": miou(res.pred, gt, 2),
                "loss_se": values["se"], "loss_be": values["be"],
                "loss_dc": values["dc"], "loss_all": values["all"],
                "iteration": it, "wall_clock_ms": round(ms, 3),
            })
        it += 1
    result = TrainResult(model, rows, out, skipped)
    if evaluate:
        result.report = evaluate_model(model, ds, cfg.flags, hp.n_chunks)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(rows), newline="")
        cfg.save(out / "config.json")
        save_model(model, out / "model", cfg.flags, iteration=n_steps)
        if result.report is not None:
            (out / "eval.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    return result


def ablate(cfg: TrainConfig, seeds: Sequence[int] = (0, 1, 2), variants: Optional[Sequence[str]] = None,
           dataset: Optional[Dataset] = None) -> dict:
    """Train and evaluate every ablation variant for every seed; returns mean novel-class Dice per variant."""
    ds = dataset if dataset is not None else load_or_generate(cfg)
    names = list(variants) if variants is not None else list(ABLATIONS)
    summary: Dict[str, dict] = {}
    for name in names:
        scores = []
        for s in seeds:
            sub_out = str(Path(cfg.output_dir) / name / f"seed{s}") if cfg.output_dir else None
            c = replace(cfg, seed=int(s), flags=ABLATIONS[name], output_dir=sub_out)
            t0 = time.perf_counter()
            r = train(c, dataset=ds, evaluate=True)
            log.info("%s seed %s: dice %.4f (%.1fs)", name, s, r.report["mean_dice"], time.perf_counter() - t0)
            scores.append(r.report["mean_dice"])
        summary[name] = {"per_seed": scores, "mean_dice": float(np.mean(scores))}
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.output_dir) / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
