"""Prototype correlation matching.

SVD-initialised prototypes for the query and every support image, sigmoid
attention that injects task context into them, an entropic optimal-transport
plan between support and query prototypes, and the prototype enhancement loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from scipy.special import logsumexp
from torch import nn

from pmcr.core import DTYPE, as_tensor
from pmcr.errors import (
    DegenerateMarginal,
    DegenerateScores,
    DimMismatch,
    EmptyForeground,
    NonConvergence,
    RankTooLarge,
)
from pmcr.linalg import AttentionWeights, multi_head_attention, truncated_svd

log = logging.getLogger(__name__)

MARGINAL_FLOOR = 1e-12


@dataclass
class PrototypeSet:
    protos: torch.Tensor  # S x D_l
    side: str  # "query" | "support"
    support_index: Optional[int] = None

    @property
    def count(self) -> int:
        return self.protos.shape[0]


@dataclass
class TransportPlan:
    T: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iters: int = 0
    violation: float = 0.0
    log_domain: bool = False
    history: List[float] = field(default_factory=list)


def foreground_extract(F: torch.Tensor, m) -> torch.Tensor:
    """Feature columns (``D x N_i``) at non-zero mask positions, row-major scan order."""
    m = torch.as_tensor(np.asarray(m)) if not isinstance(m, torch.Tensor) else m
    if F.ndim != 3 or tuple(F.shape[1:]) != tuple(m.shape):
        raise DimMismatch(f"features {tuple(F.shape)} vs mask {tuple(m.shape)}")
    sel = (m != 0).reshape(-1)
    if not bool(sel.any()):
        raise EmptyForeground("mask has no foreground pixel")
    return F.reshape(F.shape[0], -1)[:, sel]


def similarity_matrix(Fq: torch.Tensor, Fs: torch.Tensor) -> torch.Tensor:
    if Fq.ndim != 2 or Fs.ndim != 2 or Fq.shape[0] != Fs.shape[0]:
        raise DimMismatch(f"feature dims disagree: {tuple(Fq.shape)} vs {tuple(Fs.shape)}")
    return Fq.T @ Fs


def init_prototypes(W, Fq: torch.Tensor, Fs: torch.Tensor, S: int, support_index: Optional[int] = None):
    """Project query/support features on the leading singular bases of ``W``.

    ``W`` is ``H_lW_l x N_i``; ``Fq`` is ``D_l x H_lW_l``; ``Fs`` is ``D_l x N_i``.
    Returns ``(query prototypes, support prototypes)``, each ``S x D_l``. The
    singular vectors carry no gradient. ``S`` is clamped to the rank bound.
    """
    W = as_tensor(W)
    if W.shape != (Fq.shape[1], Fs.shape[1]):
        raise DimMismatch(f"W {tuple(W.shape)} inconsistent with features {tuple(Fq.shape)}, {tuple(Fs.shape)}")
    limit = min(W.shape)
    if S > limit:
        log.info("clamping prototype count %d -> %d (foreground too small)", S, limit)
        S = limit
    if S < 1:
        raise RankTooLarge("empty similarity matrix")
    f = truncated_svd(W.detach(), S)
    F_bq = f.U.T @ Fq.T
    F_bs = f.V @ Fs.T
    return PrototypeSet(F_bq, "query", support_index), PrototypeSet(F_bs, "support", support_index)


def _bank(n_heads: int, in_dim: int, head_dim: int, gen: torch.Generator, scale: float) -> nn.ParameterList:
    return nn.ParameterList(
        nn.Parameter(torch.randn(in_dim, head_dim, generator=gen, dtype=DTYPE) * scale)
        for _ in range(3 * n_heads)
    )


class PcmParams(nn.Module):
    """Attention banks for the support, query and joint prototype passes."""

    def __init__(self, feat_dim: int, head_dim: int, n_heads: int = 1, seed: int = 0):
        super().__init__()
        if head_dim * n_heads != feat_dim:
            raise DimMismatch("head_dim * n_heads must equal feat_dim")
        gen = torch.Generator().manual_seed(seed)
        scale = 1.0 / math.sqrt(feat_dim)
        self.n_heads = n_heads
        self.support = _bank(n_heads, feat_dim, head_dim, gen, scale)
        self.query = _bank(n_heads, feat_dim, head_dim, gen, scale)
        self.joint = _bank(n_heads, feat_dim, head_dim, gen, scale)

    @staticmethod
    def heads(bank: nn.ParameterList) -> List[AttentionWeights]:
        return [AttentionWeights(bank[3 * h], bank[3 * h + 1], bank[3 * h + 2]) for h in range(len(bank) // 3)]

    def zero_(self) -> "PcmParams":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def propagate_task_info(F_bq: PrototypeSet, F_bs: PrototypeSet, Fq: torch.Tensor, Fs: torch.Tensor, params: PcmParams):
    """Context-enrich both prototype sets and mix them through joint attention.

    ``Fq``/``Fs`` are the ``D_l x N`` feature columns. Returns the propagated
    ``(query, support)`` prototype sets; no residual connection.
    """
    S = F_bs.count
    if F_bq.count != S:
        raise DimMismatch("support and query prototype counts differ")
    A_s = multi_head_attention(F_bs.protos, Fs.T, params.heads(params.support))
    A_q = multi_head_attention(F_bq.protos, Fq.T, params.heads(params.query))
    if A_s.shape[1] != F_bs.protos.shape[1]:
        raise DimMismatch("concatenated head width must equal feat_dim")
    F_b = torch.cat([A_s, A_q], dim=0)
    F_b = multi_head_attention(F_b, F_b, params.heads(params.joint))
    sup = PrototypeSet(F_b[:S], "support", F_bs.support_index)
    qry = PrototypeSet(F_b[S:], "query", F_bq.support_index)
    return qry, sup


def marginals_from_similarity(F_b, feats: torch.Tensor) -> torch.Tensor:
    """Softmax over prototypes of the summed prototype/feature dot products."""
    P = F_b.protos if isinstance(F_b, PrototypeSet) else F_b
    if P.shape[1] != feats.shape[0]:
        raise DimMismatch(f"prototypes {tuple(P.shape)} vs features {tuple(feats.shape)}")
    scores = (P @ feats).sum(dim=1)
    if not torch.isfinite(scores).all():
        raise DegenerateScores("non-finite prototype scores")
    p = torch.softmax(scores, dim=0)
    if bool((p < MARGINAL_FLOOR).any()):
        p = p.clamp_min(MARGINAL_FLOOR)
        p = p / p.sum()
    return p


def _check_marginal(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DegenerateMarginal(f"{name} must be strictly positive")
    if abs(x.sum() - 1.0) > 1e-9:
        raise DegenerateMarginal(f"{name} sums to {x.sum():.12f}, expected 1")
    return x


def sinkhorn(
    M_b,
    u,
    v,
    mu: float = 0.1,
    max_iters: int = 500,
    tol: float = 1e-6,
    log_domain: Optional[bool] = None,
    raise_on_fail: bool = True,
) -> TransportPlan:
    """Entropic OT plan for cost ``1 - M_b`` with row sums ``u`` and column sums ``v``.

    Alternates row and column scalings until the larger of the two marginal
    violations is at most ``tol``. The log-domain path is chosen automatically
    when ``mu <= 0.01`` or the Gibbs kernel underflows.
    """
    M = np.asarray(M_b.detach().cpu().numpy() if isinstance(M_b, torch.Tensor) else M_b, dtype=np.float64)
    if isinstance(u, torch.Tensor):
        u = u.detach().cpu().numpy()
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    u = _check_marginal(u, "u")
    v = _check_marginal(v, "v")
    if M.shape != (len(u), len(v)):
        raise DimMismatch(f"cost {M.shape} vs marginals ({len(u)}, {len(v)})")
    if mu <= 0:
        raise ValueError("mu must be positive")
    if not np.all(np.isfinite(M)):
        raise DegenerateMarginal("similarity matrix has non-finite entries")
    C = 1.0 - M
    Cs = C - C.min()  # a constant shift leaves the plan unchanged
    if log_domain is None:
        log_domain = mu <= 0.01 or bool(np.any(np.exp(-Cs / mu) < 1e-200))
    if not log_domain:
        with np.errstate(over="raise", divide="raise", invalid="raise"):
            try:
                return _sinkhorn_plain(Cs, u, v, mu, max_iters, tol, raise_on_fail)
            except FloatingPointError:
                pass
    return _sinkhorn_log(Cs, u, v, mu, max_iters, tol, raise_on_fail)


def _violation(T: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
    return max(np.abs(T.sum(1) - u).max(), np.abs(T.sum(0) - v).max())


def _sinkhorn_plain(C, u, v, mu, max_iters, tol, raise_on_fail):
    K = np.exp(-C / mu)
    b = np.ones_like(v)
    Kb = K @ b
    history = []
    viol = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        a = u / Kb
        KTa = K.T @ a
        b = v / KTa
        Kb = K @ b  # reused by the next row scaling
        viol = max(np.abs(a * Kb - u).max(), np.abs(b * KTa - v).max())
        history.append(viol)
        if viol <= tol:
            break
    T = a[:, None] * K * b[None, :]
    plan = TransportPlan(T, u, v, it, float(viol), False, history)
    if viol > tol and raise_on_fail:
        raise NonConvergence(float(viol), it, plan)
    return plan


def _sinkhorn_log(C, u, v, mu, max_iters, tol, raise_on_fail):
    logu, logv = np.log(u), np.log(v)
    f = np.zeros_like(u)
    g = np.zeros_like(v)
    history = []
    viol = np.inf
    T = None
    it = 0
    for it in range(1, max_iters + 1):
        f = mu * (logu - logsumexp((g[None, :] - C) / mu, axis=1))
        g = mu * (logv - logsumexp((f[:, None] - C) / mu, axis=0))
        T = np.exp((f[:, None] + g[None, :] - C) / mu)
        viol = _violation(T, u, v)
        history.append(viol)
        if viol <= tol:
            break
    plan = TransportPlan(T, u, v, it, float(viol), True, history)
    if viol > tol and raise_on_fail:
        raise NonConvergence(float(viol), it, plan)
    return plan


def entropic_objective(T, M_b, mu: float) -> float:
    """``<T, 1 - M_b> + mu * sum T log T``, the quantity Sinkhorn minimises."""
    T = np.asarray(T, dtype=np.float64)
    M = np.asarray(M_b, dtype=np.float64)
    ent = np.sum(np.where(T > 0, T * np.log(np.where(T > 0, T, 1.0)), 0.0))
    return float(np.sum(T * (1.0 - M)) + mu * ent)


def prototype_match(M_b: torch.Tensor, T) -> torch.Tensor:
    plan = as_tensor(T.T if isinstance(T, TransportPlan) else T).detach()
    if M_b.shape != plan.shape:
        raise DimMismatch(f"M_b {tuple(M_b.shape)} vs plan {tuple(plan.shape)}")
    return M_b * plan


def prototype_enhancement_loss(
    W_stars: Sequence[torch.Tensor], F_bs: Sequence, F_bq: Sequence
) -> torch.Tensor:
    if not (len(W_stars) == len(F_bs) == len(F_bq)) or len(W_stars) == 0:
        raise DimMismatch("need one (W*, support, query) triple per shot")
    total = torch.zeros((), dtype=DTYPE)
    for W, s, q in zip(W_stars, F_bs, F_bq):
        s = s.protos if isinstance(s, PrototypeSet) else s
        q = q.protos if isinstance(q, PrototypeSet) else q
        W_r = s @ q.T
        if W.shape != W_r.shape:
            raise DimMismatch(f"W* {tuple(W.shape)} vs reference {tuple(W_r.shape)}")
        total = total + ((W - W_r) ** 2).sum()
    return total


@dataclass
class PcmOutput:
    loss: torch.Tensor
    plans: List[TransportPlan]
    M_b: List[torch.Tensor]
    W_star: List[torch.Tensor]
    clamped: bool = False
    nonconverged: int = 0


def run_pcm(Fq: torch.Tensor, Fs_fg: Sequence[torch.Tensor], params: PcmParams, S: int, mu: float,
            max_iters: int = 500, tol: float = 1e-6) -> PcmOutput:
    """Full matching pass for one episode: ``Fq`` is ``D_l x H_lW_l``, ``Fs_fg`` the K foreground sets."""
    W_stars, bs, bq, plans, Ms = [], [], [], [], []
    clamped = False
    bad = 0
    for i, Fs in enumerate(Fs_fg):
        W = similarity_matrix(Fq, Fs)
        clamped |= S > min(W.shape)
        p_q, p_s = init_prototypes(W.detach(), Fq, Fs, S, support_index=i)
        t_q, t_s = propagate_task_info(p_q, p_s, Fq, Fs, params)
        M_b = t_s.protos @ t_q.protos.T
        u = marginals_from_similarity(p_s, Fs)
        v = marginals_from_similarity(p_q, Fq)
        try:
            plan = sinkhorn(M_b, u, v, mu, max_iters, tol)
        except NonConvergence as exc:
            # keep the last iterate but surface the failure to the caller
            log.warning("sinkhorn did not converge: %s", exc)
            plan = exc.plan
            bad += 1
        W_stars.append(prototype_match(M_b, plan.T))
        bs.append(p_s)
        bq.append(p_q)
        plans.append(plan)
        Ms.append(M_b)
    loss = prototype_enhancement_loss(W_stars, bs, bq)
    return PcmOutput(loss, plans, Ms, W_stars, clamped, bad)
