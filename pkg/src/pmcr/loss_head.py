"""Local-prototype cosine classifier and the segmentation, Dice and combined losses."""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from pmcr.core import DTYPE
from pmcr.errors import DimMismatch, EmptyForeground, EmptyUnion, NonFiniteComponent

PROB_FLOOR = 1e-12

Number = Union[float, torch.Tensor]


def one_hot(mask, n_classes: int) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask), dtype=torch.long) if not isinstance(mask, torch.Tensor) else mask.long()
    if int(m.max()) >= n_classes or int(m.min()) < 0:
        raise ValueError(f"labels outside [0, {n_classes})")
    return F.one_hot(m, n_classes).to(DTYPE)


def _window_sums(x: torch.Tensor, L: int) -> torch.Tensor:
    """Sum over non-overlapping ``L x L`` windows of a ``C x h x w`` map (zero padded)."""
    C, h, w = x.shape
    ph, pw = (-h) % L, (-w) % L
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    H2, W2 = x.shape[1] // L, x.shape[2] // L
    return x.reshape(C, H2, L, W2, L).sum(dim=(2, 4)).reshape(C, -1)


def class_prototypes(support_features: Sequence[torch.Tensor], support_masks: Sequence, c: int,
                     window: int) -> Optional[torch.Tensor]:
    """Local window prototypes plus one global prototype for class ``c`` (rows)."""
    protos = []
    g_sum, g_cnt = None, 0.0
    for feat, m in zip(support_features, support_masks):
        m = torch.as_tensor(np.asarray(m)) if not isinstance(m, torch.Tensor) else m
        sel = (m == c).to(feat.dtype)
        if tuple(sel.shape) != tuple(feat.shape[1:]):
            raise DimMismatch(f"mask {tuple(sel.shape)} vs features {tuple(feat.shape)}")
        cnt = float(sel.sum())
        if cnt == 0:
            continue
        masked = feat * sel
        s = _window_sums(masked, window)
        n = _window_sums(sel[None], window)[0]
        keep = n > 0
        protos.append((s[:, keep] / n[keep]).T)
        tot = masked.sum(dim=(1, 2))
        g_sum = tot if g_sum is None else g_sum + tot
        g_cnt += cnt
    if g_sum is None:
        return None
    protos.append((g_sum / g_cnt)[None])
    return torch.cat(protos, dim=0)


def _unit(x: torch.Tensor, dim: int) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(1e-8)


def upsample_nearest(x: torch.Tensor, size: tuple) -> torch.Tensor:
    """``C x h x w`` to ``C x H x W`` by pixel replication (nearest neighbour)."""
    if tuple(x.shape[1:]) == tuple(size):
        return x
    return F.interpolate(x[None], size=tuple(size), mode="nearest")[0]


def prototype_classifier(query_features: torch.Tensor, support_features: Sequence[torch.Tensor],
                         support_masks: Sequence, alpha: float = 20.0, n_classes: int = 2,
                         window: int = 4, out_size: Optional[tuple] = None,
                         mode: str = "nearest") -> torch.Tensor:
    """Per-pixel class probabilities ``H x W x C``.

    Score of class ``c`` at a pixel is ``alpha`` times the best cosine
    similarity to any of ``c``'s prototypes; classes absent from every
    support are excluded from the softmax.
    """
    if len(support_features) == 0:
        raise EmptyForeground("no support pairs")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    D, h, w = query_features.shape
    q = _unit(query_features.reshape(D, -1), 0)
    scores = []
    for c in range(n_classes):
        P = class_prototypes(support_features, support_masks, c, window)
        if P is None:
            scores.append(torch.full((h * w,), -math.inf, dtype=query_features.dtype))
            continue
        cos = _unit(P, 1) @ q
        scores.append(alpha * cos.max(dim=0).values)
    logits = torch.stack(scores, 0)
    if not torch.isfinite(logits).any(dim=0).all():
        raise EmptyForeground("no class has a prototype")
    probs = torch.softmax(logits, dim=0).reshape(n_classes, h, w)
    if out_size is not None:
        if mode == "nearest":
            probs = upsample_nearest(probs, out_size)
        elif mode == "bilinear":
            probs = F.interpolate(probs[None], size=tuple(out_size), mode="bilinear", align_corners=False)[0]
        else:
            raise ValueError(f"unknown upsampling mode {mode!r}")
    return probs.permute(1, 2, 0)


def ce_loss(P: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    """``-(1/(H W C)) sum G log P`` with ``P`` clamped away from zero."""
    if P.shape != G.shape:
        raise DimMismatch(f"P {tuple(P.shape)} vs G {tuple(G.shape)}")
    return -(G * torch.log(P.clamp_min(PROB_FLOOR))).sum() / P.numel()


def dice_loss(P: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    if P.shape != G.shape:
        raise DimMismatch(f"P {tuple(P.shape)} vs G {tuple(G.shape)}")
    denom = P.sum() + G.sum()
    if float(denom.detach()) == 0.0:
        raise EmptyUnion("prediction and ground truth are both empty")
    return 1.0 - 2.0 * (P * G).sum() / denom


def total_loss(l_se: Number, l_be: Number, l_dc: Number, lambda1: float = 0.5, lambda2: float = 1.0) -> Number:
    for name, v in (("se", l_se), ("be", l_be), ("dc", l_dc)):
        x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(x):
            raise NonFiniteComponent(f"loss component {name} is {x}")
    return l_se + lambda1 * l_be + lambda2 * l_dc
