"""Class-relation reasoning.

Masked superpixel centroids of the support foreground, a per-class centroid
memory, a relation graph over support/memory/query descriptors, and the
kernel attention that reweights the query encoding convolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pmcr.core import DTYPE, Rng
from pmcr.errors import DimMismatch, EvenKernel, MissingMemoryClass

log = logging.getLogger(__name__)


@dataclass
class SuperpixelCentroids:
    centroids: torch.Tensor  # D_l x N_s
    class_id: int

    @property
    def count(self) -> int:
        return self.centroids.shape[1]


def superpixel_count(n_pixels: int, pixels_per_superpixel: int = 80, max_superpixels: int = 10) -> int:
    if n_pixels < 1:
        raise ValueError("need at least one foreground pixel")
    return max(1, min(n_pixels // pixels_per_superpixel, max_superpixels))


def seed_indices(n_pixels: int, n_seeds: int) -> np.ndarray:
    """Centres of ``n_seeds`` equal segments of the foreground scan."""
    return np.floor((np.arange(n_seeds) + 0.5) * n_pixels / n_seeds).astype(np.int64)


def _slic_step(X: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    dist = ((X[:, :, None] - S[:, None, :]) ** 2).sum(0)  # N x N_s
    # normalised exp(-dist) per centroid; same value as Z / sum_p Z without underflow
    w = torch.softmax(-dist, dim=0)
    return X @ w


def masked_slic(Fs_fg: torch.Tensor, n_seeds: int, iters: int = 5, rng: Optional[Rng] = None,
                class_id: int = 1) -> SuperpixelCentroids:
    """Soft SLIC on foreground feature columns (``D x N``).

    Only the last update carries gradient; earlier iterations run detached.
    ``rng`` is accepted for interface symmetry, seeding is deterministic.
    """
    D, N = Fs_fg.shape
    if n_seeds > N:
        log.info("reducing superpixel count %d -> %d (too few foreground pixels)", n_seeds, N)
        n_seeds = N
    S = Fs_fg[:, torch.as_tensor(seed_indices(N, n_seeds))]
    if iters <= 0:
        return SuperpixelCentroids(S, class_id)
    with torch.no_grad():
        Sd = S.detach()
        for _ in range(iters - 1):
            Sd = _slic_step(Fs_fg.detach(), Sd)
    return SuperpixelCentroids(_slic_step(Fs_fg, Sd), class_id)


class ClassMemory:
    """Per-class buffers of at most ``capacity`` detached centroids.

    Update rule: draw ``min(capacity, n_new)`` of the new centroids without
    replacement; each is appended while the buffer has room, otherwise it
    overwrites a uniformly chosen slot.
    """

    def __init__(self, capacity: int = 5, rng: Optional[Rng] = None):
        self.capacity = int(capacity)
        self.rng = rng if rng is not None else Rng(0)
        self.buffers: Dict[int, List[torch.Tensor]] = {}

    def count(self, class_id: int) -> int:
        return len(self.buffers.get(class_id, []))

    def classes(self) -> List[int]:
        return sorted(c for c, b in self.buffers.items() if b)

    def update(self, class_id: int, centroids: torch.Tensor) -> None:
        cols = centroids.detach().clone()
        n_new = cols.shape[1]
        if n_new == 0:
            return
        buf = self.buffers.setdefault(int(class_id), [])
        picked = self.rng.choice(n_new, size=min(self.capacity, n_new), replace=False)
        for j in picked:
            if len(buf) < self.capacity:
                buf.append(cols[:, int(j)])
            else:
                buf[int(self.rng.integers(0, self.capacity))] = cols[:, int(j)]

    def sample(self, class_id: int, n: int) -> torch.Tensor:
        buf = self.buffers.get(int(class_id), [])
        if not buf:
            raise MissingMemoryClass(int(class_id))
        idx = self.rng.choice(len(buf), size=n, replace=len(buf) < n)
        return torch.stack([buf[int(i)] for i in idx], dim=1)

    def snapshot(self) -> "ClassMemory":
        snap = ClassMemory(self.capacity, Rng.from_state(self.rng.get_state()))
        snap.buffers = {c: list(b) for c, b in self.buffers.items()}
        return snap


def memory_update(mem: ClassMemory, class_id: int, centroids: SuperpixelCentroids) -> ClassMemory:
    if centroids.class_id != class_id:
        raise ValueError(f"centroids belong to class {centroids.class_id}, not {class_id}")
    mem.update(class_id, centroids.centroids)
    return mem


@dataclass
class Bags:
    B_a: torch.Tensor  # D_l x N_a
    n_support: int
    memory_blocks: List[tuple] = field(default_factory=list)  # (class_id, count)
    n_query: int = 0
    skipped: List[int] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return self.B_a.shape[1]


def build_bags(support_centroids: Sequence[SuperpixelCentroids], mem: Optional[ClassMemory],
               all_class_ids: Sequence[int], Fq: torch.Tensor, W_q: torch.Tensor,
               on_missing: str = "raise") -> Bags:
    """Support bag (+ memory repair for absent classes) followed by the query bag."""
    D = Fq.shape[0]
    if W_q.shape[0] != Fq.shape[1] * Fq.shape[2]:
        raise DimMismatch(f"W_q has {W_q.shape[0]} rows, query has {Fq.shape[1] * Fq.shape[2]} pixels")
    parts = [sc.centroids for sc in support_centroids]
    present = {sc.class_id for sc in support_centroids}
    n_support = sum(p.shape[1] for p in parts)
    blocks, skipped = [], []
    for c in all_class_ids:
        if c in present:
            continue
        try:
            if mem is None:
                raise MissingMemoryClass(int(c))
            parts.append(mem.sample(c, mem.capacity).to(Fq.dtype))
            blocks.append((int(c), mem.capacity))
        except MissingMemoryClass:
            if on_missing == "raise":
                raise
            log.info("class %s missing from memory; no repair", c)
            skipped.append(int(c))
    B_q = Fq.reshape(D, -1) @ W_q
    B_a = torch.cat(parts + [B_q], dim=1)
    return Bags(B_a, n_support, blocks, B_q.shape[1], skipped)


def relation_edges(B_a: torch.Tensor, W_s1: torch.Tensor, W_s2: torch.Tensor) -> torch.Tensor:
    if W_s1.shape != W_s2.shape or W_s1.shape[1] != B_a.shape[0]:
        raise DimMismatch(f"projections {tuple(W_s1.shape)}/{tuple(W_s2.shape)} vs nodes {tuple(B_a.shape)}")
    return (W_s1 @ B_a).T @ (W_s2 @ B_a)


def graph_propagate(B_a: torch.Tensor, E: torch.Tensor, W_g: torch.Tensor) -> torch.Tensor:
    """Residual gated propagation; the gate is a softmax over nodes for each channel."""
    N = B_a.shape[1]
    if E.shape != (N, N) or W_g.shape != (B_a.shape[0], B_a.shape[0]):
        raise DimMismatch("edge or weight shape inconsistent with node set")
    gate = torch.softmax((E @ B_a.T @ W_g).T, dim=1)
    return B_a + gate * B_a


def kernel_attention(B_n: torch.Tensor, W_c: torch.Tensor, W_c1: torch.Tensor, W_c2: torch.Tensor,
                     kernel_size: int, normalization: str = "joint") -> torch.Tensor:
    """Convolution-kernel attention ``D_u x D_l x n x n`` from the propagated bag.

    ``normalization="input"`` takes the softmax over input channels for every
    (output channel, tap); the output-channel term then cancels and ``W_c``,
    ``W_c1`` get no gradient. ``"joint"`` normalises over the whole
    (output, input) channel plane of each tap, keeping both terms alive.
    """
    n = kernel_size
    D_l, N_a = B_n.shape
    if W_c.shape[1] != D_l or W_c1.shape != (N_a, n * n) or W_c2.shape != (N_a, n * n):
        raise DimMismatch("kernel attention weights inconsistent with bag")
    F_n = W_c @ B_n
    M1 = (F_n @ W_c1).reshape(-1, 1, n, n)
    M2 = (B_n @ W_c2).reshape(1, D_l, n, n)
    logits = M1 + M2
    if normalization == "input":
        return torch.softmax(logits, dim=1)
    if normalization == "joint":
        D_u = logits.shape[0]
        return torch.softmax(logits.reshape(D_u * D_l, n, n), dim=0).reshape(D_u, D_l, n, n)
    raise ValueError(f"unknown normalization {normalization!r}")


def refine_and_encode(Fq: torch.Tensor, Q_k: torch.Tensor, A_k: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-correlate ``Fq`` (``D_l x H x W``) with ``A_k * Q_k``, same-size zero padding."""
    n1, n2 = Q_k.shape[2], Q_k.shape[3]
    if n1 != n2 or n1 % 2 == 0:
        raise EvenKernel(f"kernel must be square and odd, got {n1}x{n2}")
    if Q_k.shape[1] != Fq.shape[0]:
        raise DimMismatch(f"kernel expects {Q_k.shape[1]} channels, features have {Fq.shape[0]}")
    kernel = Q_k if A_k is None else A_k * Q_k
    return F.conv2d(Fq[None], kernel, padding=(n1 - 1) // 2)[0]


class CrrParams(nn.Module):
    """Weights of the relation graph and the refined query kernel.

    ``W_c1``/``W_c2`` have one row per node slot; a bag uses the rows of
    the slots it fills (see :func:`node_slots`).
    """

    def __init__(self, feat_dim: int, out_dim: int, relation_dim: int, n_pixels: int, n_query: int,
                 n_slots: int, kernel_size: int = 3, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        n = kernel_size

        def rnd(*shape, scale):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=DTYPE) * scale)

        self.W_s1 = rnd(relation_dim, feat_dim, scale=1 / math.sqrt(feat_dim))
        self.W_s2 = rnd(relation_dim, feat_dim, scale=1 / math.sqrt(feat_dim))
        self.W_g = rnd(feat_dim, feat_dim, scale=1 / math.sqrt(feat_dim))
        self.W_q = nn.Parameter(
            torch.full((n_pixels, n_query), 1.0 / n_pixels, dtype=DTYPE)
            + torch.randn(n_pixels, n_query, generator=g, dtype=DTYPE) / n_pixels
        )
        self.W_c = rnd(out_dim, feat_dim, scale=1 / math.sqrt(feat_dim))
        self.W_c1 = rnd(n_slots, n * n, scale=0.1 / math.sqrt(n_slots))
        self.W_c2 = rnd(n_slots, n * n, scale=0.1 / math.sqrt(n_slots))
        Q = torch.randn(out_dim, feat_dim, n, n, generator=g, dtype=DTYPE) * (0.1 / math.sqrt(feat_dim * n * n))
        c = n // 2
        for a in range(min(out_dim, feat_dim)):
            Q[a, a, c, c] += 1.0
        self.Q_k = nn.Parameter(Q)
        self.kernel_size = n


def node_slots(per_shot_counts: Sequence[int], max_superpixels: int, memory_blocks: Sequence[tuple],
               class_order: Sequence[int], memory_size: int, n_query: int, n_slots: int) -> torch.Tensor:
    """Row indices into ``W_c1``/``W_c2`` for every node of a bag.

    Shot ``k`` owns slots ``[k*max_superpixels, (k+1)*max_superpixels)``,
    memory for the ``j``-th class of ``class_order`` owns a block of
    ``memory_size`` slots after all shot slots, and query descriptors
    always use the final ``n_query`` slots.
    """
    idx = []
    for k, cnt in enumerate(per_shot_counts):
        idx.extend(range(k * max_superpixels, k * max_superpixels + cnt))
    base = len(per_shot_counts) * max_superpixels
    for cls, cnt in memory_blocks:
        j = list(class_order).index(cls)
        idx.extend(range(base + j * memory_size, base + j * memory_size + cnt))
    idx.extend(range(n_slots - n_query, n_slots))
    return torch.as_tensor(idx, dtype=torch.long)
