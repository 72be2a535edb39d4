"""End-to-end episode forward pass: encoder, PCM, CRR, classifier, losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from pmcr.core import DTYPE, Episode, Hyperparams, Rng, downsample_mask
from pmcr.crr import (
    ClassMemory,
    CrrParams,
    build_bags,
    graph_propagate,
    kernel_attention,
    masked_slic,
    memory_update,
    node_slots,
    refine_and_encode,
    relation_edges,
    superpixel_count,
)
from pmcr.encoder import Encoder
from pmcr.errors import EmptyForeground
from pmcr.harness.config import Flags
from pmcr.loss_head import ce_loss, dice_loss, one_hot, prototype_classifier, total_loss
from pmcr.pcm import PcmParams, foreground_extract, run_pcm

log = logging.getLogger(__name__)


class PMCRModel(nn.Module):
    def __init__(self, hp: Hyperparams, class_ids: Sequence[int], seed: int = 0):
        super().__init__()
        self.hp = hp
        self.class_ids = sorted(int(c) for c in class_ids)
        root = Rng(seed)
        fs = hp.feat_size
        self.n_slots = hp.n_shots * hp.max_superpixels + hp.memory_size * len(self.class_ids) + hp.n_query_descriptors
        self.encoder = Encoder(hp.feat_dim, hp.encoder_channels, hp.encoder_strides, seed=root.child(1).seed)
        self.pcm = PcmParams(hp.feat_dim, hp.head_dim, hp.n_heads, seed=root.child(2).seed % 2**63)
        self.crr = CrrParams(hp.feat_dim, hp.out_dim, hp.relation_dim, fs * fs, hp.n_query_descriptors,
                             self.n_slots, hp.kernel_size, seed=root.child(3).seed % 2**63)
        self.memory = ClassMemory(hp.memory_size, root.child(4))
        self.seen_classes: set = set()


@dataclass
class EpisodeResult:
    probs: torch.Tensor  # H x W x C
    losses: Optional[Dict[str, torch.Tensor]] = None
    pred: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


def _binary(mask, class_id: Optional[int]) -> np.ndarray:
    m = np.asarray(mask)
    if class_id is None:
        return (m != 0).astype(np.int64)
    return (m == class_id).astype(np.int64)


def run_episode(e: Episode, model: PMCRModel, flags: Flags, train: bool = False,
                binarize: bool = True) -> EpisodeResult:
    """Segment the query of ``e`` for class ``e.class_id``.

    With ``train=True`` the class memory is updated with this episode's
    support centroids and the episode class is marked as seen. Masks are
    reduced to binary foreground/background for ``e.class_id`` unless
    ``binarize=False`` (then they must already be binary).
    """
    hp = model.hp
    H, W = np.shape(e.query_image)[:2]
    imgs = np.stack([*e.support_images, e.query_image]).astype(np.float64)
    feats = model.encoder(torch.as_tensor(imgs, dtype=DTYPE))
    Fs_maps, Fq_map = list(feats[:-1]), feats[-1]
    D, h, w = Fq_map.shape
    cid = e.class_id if binarize else None
    s_masks_img = [_binary(m, cid) for m in e.support_masks]
    s_masks = [downsample_mask(m, (h, w)) for m in s_masks_img]
    if any(m.sum() == 0 for m in s_masks):
        raise EmptyForeground("support foreground vanishes at feature resolution")
    Fs_fg = [foreground_extract(F, torch.as_tensor(m)) for F, m in zip(Fs_maps, s_masks)]
    Fq = Fq_map.reshape(D, -1)
    diag: dict = {}

    l_be = torch.zeros((), dtype=DTYPE)
    if flags.pcm_on:
        out = run_pcm(Fq, Fs_fg, model.pcm, hp.n_prototypes, hp.mu, hp.sinkhorn_iters, hp.sinkhorn_tol)
        l_be = out.loss
        diag["transport"] = [p.T for p in out.plans]
        diag["sinkhorn_nonconverged"] = out.nonconverged

    A_k = None
    if flags.crr_on:
        cents = []
        for k, (fg, m_img) in enumerate(zip(Fs_fg, s_masks_img)):
            n_s = superpixel_count(int(m_img.sum()), hp.superpixel_size, hp.max_superpixels)
            cents.append(masked_slic(fg, min(n_s, hp.max_superpixels), hp.slic_iters, class_id=e.class_id))
        all_ids = sorted(model.seen_classes | {e.class_id})
        bags = build_bags(cents, model.memory, all_ids, Fq_map, model.crr.W_q, on_missing="skip")
        slots = node_slots([c.count for c in cents], hp.max_superpixels, bags.memory_blocks, model.class_ids,
                           hp.memory_size, hp.n_query_descriptors, model.n_slots)
        E = relation_edges(bags.B_a, model.crr.W_s1, model.crr.W_s2)
        B_n = graph_propagate(bags.B_a, E, model.crr.W_g)
        A_k = kernel_attention(B_n, model.crr.W_c, model.crr.W_c1[slots], model.crr.W_c2[slots],
                               hp.kernel_size, hp.kernel_normalization)
        diag["n_nodes"] = bags.n_nodes
        diag["memory_skipped"] = bags.skipped
        if train:
            for c in cents:
                memory_update(model.memory, e.class_id, c)

    Fq_final = refine_and_encode(Fq_map, model.crr.Q_k, A_k)
    Fs_final = [refine_and_encode(F, model.crr.Q_k, A_k) for F in Fs_maps]
    probs = prototype_classifier(Fq_final, Fs_final, [torch.as_tensor(m) for m in s_masks],
                                 hp.classifier_alpha, 2, hp.classifier_window, out_size=(H, W))
    pred = probs.detach().argmax(dim=2).numpy()
    if train:
        model.seen_classes.add(e.class_id)

    losses = None
    if e.query_mask is not None:
        G = one_hot(_binary(e.query_mask, cid), 2)
        l_se = ce_loss(probs, G)
        l_dc = dice_loss(probs, G)
        l_all = total_loss(l_se, l_be, l_dc, hp.lambda1, hp.lambda2 if flags.dcl_on else 0.0)
        losses = {"se": l_se, "be": l_be, "dc": l_dc, "all": l_all}
    return EpisodeResult(probs, losses, pred, diag)
