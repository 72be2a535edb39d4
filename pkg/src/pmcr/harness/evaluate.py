"""Dice / mIoU metrics and the chunked volumetric evaluation protocol."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from pmcr.core import Episode
from pmcr.errors import DimMismatch, EmptyScan, EmptyForeground

Predictor = Callable[[Episode], np.ndarray]


def dice_score(pred, gt) -> float:
    """``2|A & B| / (|A| + |B|)`` over non-zero voxels; 1.0 when both are empty."""
    a = np.asarray(pred) != 0
    b = np.asarray(gt) != 0
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def miou(pred, gt, n_classes: int) -> float:
    """Mean IoU over the classes present in ``gt``."""
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise DimMismatch(f"{p.shape} vs {g.shape}")
    ious = []
    for c in range(n_classes):
        gc = g == c
        if not gc.any():
            continue
        pc = p == c
        ious.append(np.logical_and(pc, gc).sum() / np.logical_or(pc, gc).sum())
    return float(np.mean(ious)) if ious else 1.0


def chunk_bounds(n: int, P: int) -> List[tuple]:
    """``P`` contiguous ``[start, stop)`` chunks; leading chunks absorb the remainder."""
    if n < 1:
        raise EmptyScan("scan has no slices")
    if P < 1:
        raise ValueError("need at least one chunk")
    P = min(P, n)
    base, extra = divmod(n, P)
    out, start = [], 0
    for i in range(P):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def chunk_middle(bounds: tuple) -> int:
    start, stop = bounds
    return (start + stop - 1) // 2


@dataclass
class VolumeResult:
    dice: Dict[int, float]
    support_slices: List[int]
    chunks: List[tuple]
    prediction: np.ndarray
    miou: float = 0.0
    skipped: List[int] = field(default_factory=list)


def evaluate_volume(predict: Predictor, scan_images, scan_masks, support_images, support_masks,
                    class_id: int = 1, P_chunks: int = 3) -> VolumeResult:
    """Chunked 1-shot evaluation of a whole query scan against a support scan.

    The query scan and support scan are each cut into ``P_chunks`` chunks;
    every query slice in chunk ``j`` is segmented with the middle slice of
    support chunk ``j``. Predictions are restacked and scored in 3D.
    """
    n_q, n_s = len(scan_images), len(support_images)
    if n_q == 0 or n_s == 0:
        raise EmptyScan("query or support scan is empty")
    q_chunks = chunk_bounds(n_q, P_chunks)
    s_chunks = chunk_bounds(n_s, len(q_chunks))
    gt = (np.asarray(scan_masks) == class_id).astype(np.uint8)
    pred = np.zeros_like(gt)
    supports, skipped = [], []
    for (q0, q1), sb in zip(q_chunks, s_chunks):
        si = chunk_middle(sb)
        supports.append(si)
        for t in range(q0, q1):
            ep = Episode([support_images[si]], [support_masks[si]], scan_images[t],
                         query_mask=scan_masks[t], class_id=class_id)
            try:
                pred[t] = (np.asarray(predict(ep)) != 0).astype(np.uint8)
            except EmptyForeground:
                skipped.append(t)  # support slice lacks the class: predict empty
    return VolumeResult({class_id: dice_score(pred, gt)}, supports, q_chunks, pred, miou(pred, gt, 2), skipped)


def oracle_predictor(e: Episode) -> np.ndarray:
    """Returns the query's own ground truth; the protocol's upper bound."""
    return (np.asarray(e.query_mask) == e.class_id).astype(np.uint8)


def model_predictor(model, flags) -> Predictor:
    from pmcr.harness.model import run_episode

    def predict(e: Episode) -> np.ndarray:
        q = Episode(e.support_images, e.support_masks, e.query_image, None, e.class_id)
        with torch.no_grad():
            return run_episode(q, model, flags, train=False).pred

    return predict


def evaluate_model(model, dataset, flags, P_chunks: int = 3, classes: Optional[Sequence[int]] = None,
                   split: str = "test", supports: str = "all") -> dict:
    """Novel-class Dice over (support scan, query scan) pairs of ``split``.

    ``supports="all"`` lets every scan support every other scan (ordered
    pairs); ``"first"`` uses only the first scan as support.
    """
    scans = dataset.split(split)
    if len(scans) < 2:
        raise EmptyScan(f"need at least two {split} scans")
    if supports not in ("all", "first"):
        raise ValueError(f"unknown support mode {supports!r}")
    classes = list(classes) if classes is not None else list(dataset.spec.novel_classes)
    support_scans = scans if supports == "all" else scans[:1]
    predict = model_predictor(model, flags)
    report = {"supports": supports, "chunks": P_chunks, "classes": {}}
    for c in classes:
        rows = []
        for s in support_scans:
            for q in scans:
                if q is s:
                    continue
                r = evaluate_volume(predict, q.images, q.masks, s.images, s.masks, c, P_chunks)
                rows.append({"support": s.name, "query": q.name, "dice": r.dice[c], "miou": r.miou,
                             "support_slices": r.support_slices})
        report["classes"][str(c)] = {
            "mean_dice": float(np.mean([r["dice"] for r in rows])),
            "mean_miou": float(np.mean([r["miou"] for r in rows])),
            "pairs": rows,
        }
    report["mean_dice"] = float(np.mean([v["mean_dice"] for v in report["classes"].values()]))
    return report
