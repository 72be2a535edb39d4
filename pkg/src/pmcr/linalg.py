"""Truncated SVD, sigmoid attention and the finite-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
import torch

from pmcr.core import DTYPE, Rng, as_tensor
from pmcr.errors import DimMismatch, NonDifferentiablePoint, NonFiniteInput, RankTooLarge


@dataclass
class SvdFactors:
    U: torch.Tensor  # M x S
    sigma: torch.Tensor  # S
    V: torch.Tensor  # S x N

    def reconstruct(self) -> torch.Tensor:
        return (self.U * self.sigma) @ self.V


def _fix_signs(U: torch.Tensor, V: torch.Tensor):
    # first non-negligible entry of every U column is made non-negative
    tol = 1e-12 * max(float(U.abs().max()) if U.numel() else 0.0, 1.0)
    signs = torch.ones(U.shape[1], dtype=U.dtype)
    for j in range(U.shape[1]):
        nz = torch.nonzero(U[:, j].abs() > tol)
        if len(nz) and U[nz[0, 0], j] < 0:
            signs[j] = -1.0
    return U * signs, V * signs[:, None]


def _exact_svd(W: torch.Tensor, S: int):
    U, s, Vh = torch.linalg.svd(W, full_matrices=False)
    return U[:, :S], s[:S], Vh[:S]


def _randomized_svd(W: torch.Tensor, S: int, rng: Rng, oversample: int, power_iters: int):
    m, n = W.shape
    k = S + oversample
    if k >= min(m, n):
        return _exact_svd(W, S)
    omega = torch.as_tensor(rng.normal(size=(n, k)), dtype=W.dtype)
    Q, _ = torch.linalg.qr(W @ omega)
    for _ in range(power_iters):
        Z, _ = torch.linalg.qr(W.T @ Q)
        Q, _ = torch.linalg.qr(W @ Z)
    B = Q.T @ W
    Ub, s, Vh = torch.linalg.svd(B, full_matrices=False)
    return (Q @ Ub)[:, :S], s[:S], Vh[:S]


def truncated_svd(
    W,
    S: int,
    method: str = "exact",
    rng: Optional[Rng] = None,
    oversample: int = 10,
    power_iters: int = 4,
) -> SvdFactors:
    """Rank-``S`` factorisation ``W ~= U diag(sigma) V`` of a real matrix.

    ``method="randomized"`` uses a seeded Gaussian range finder with power
    iterations; it silently becomes exact when the sketch would cover the
    smaller dimension. The result is always detached from autograd.
    """
    W = as_tensor(W).detach()
    if W.ndim != 2:
        raise DimMismatch(f"expected a matrix, got shape {tuple(W.shape)}")
    if not torch.isfinite(W).all():
        raise NonFiniteInput("matrix has non-finite entries")
    S = int(S)
    if S < 1 or S > min(W.shape):
        raise RankTooLarge(f"S={S} invalid for a {W.shape[0]}x{W.shape[1]} matrix")
    if method == "exact":
        U, s, V = _exact_svd(W, S)
    elif method == "randomized":
        U, s, V = _randomized_svd(W, S, rng if rng is not None else Rng(0), oversample, power_iters)
    else:
        raise ValueError(f"unknown SVD method {method!r}")
    U, V = _fix_signs(U, V)
    return SvdFactors(U.contiguous(), s.contiguous(), V.contiguous())


@dataclass
class AttentionWeights:
    W_q: torch.Tensor
    W_k: torch.Tensor
    W_v: torch.Tensor

    @property
    def in_dim(self) -> int:
        return self.W_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W_q.shape[1]


def sigmoid_attention(queries: torch.Tensor, keys_values: torch.Tensor, w: AttentionWeights) -> torch.Tensor:
    """``sigmoid(Q Wq (K Wk)^T / sqrt(d)) K Wv`` with an element-wise sigmoid, no row normalisation."""
    if queries.ndim != 2 or keys_values.ndim != 2:
        raise DimMismatch("queries and keys_values must be matrices")
    D = w.in_dim
    if queries.shape[1] != D or keys_values.shape[1] != D:
        raise DimMismatch(
            f"feature dims {queries.shape[1]}, {keys_values.shape[1]} do not match weights ({D})"
        )
    if w.W_k.shape != w.W_q.shape or w.W_v.shape != w.W_q.shape:
        raise DimMismatch("W_q, W_k, W_v must share shape")
    d = w.head_dim
    logits = (queries @ w.W_q) @ (keys_values @ w.W_k).T / math.sqrt(d)
    return torch.sigmoid(logits) @ (keys_values @ w.W_v)


def multi_head_concat(heads: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(heads) == 0:
        raise DimMismatch("no heads to concatenate")
    rows = {h.shape[0] for h in heads}
    if len(rows) != 1 or any(h.ndim != 2 for h in heads):
        raise DimMismatch(f"heads disagree on row count: {sorted(rows)}")
    if len(heads) == 1:
        return heads[0]
    return torch.cat(list(heads), dim=1)


def multi_head_attention(queries, keys_values, heads: Sequence[AttentionWeights]) -> torch.Tensor:
    return multi_head_concat([sigmoid_attention(queries, keys_values, w) for w in heads])


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def _scalarize(out: torch.Tensor, seed: int = 1234) -> torch.Tensor:
    if out.ndim == 0:
        return out
    # fixed random contraction so every output entry contributes
    g = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * proj).sum()


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    eps: float = 1e-4,
    wrt: Optional[Sequence[str]] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
    check_kinks: bool = False,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn(**inputs)`` with central differences.

    Non-scalar outputs are contracted with a fixed random tensor. The error
    for one parameter is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, 1e-10)``. ``max_entries`` samples that many coordinates per
    parameter instead of perturbing every entry.
    """
    names = list(wrt) if wrt is not None else list(inputs)
    base = {k: as_tensor(v).detach().clone() for k, v in inputs.items()}

    leaves = {k: v.clone().requires_grad_(k in names) for k, v in base.items()}
    out = _scalarize(fn(**leaves))
    grads = torch.autograd.grad(out, [leaves[k] for k in names], allow_unused=True)
    analytic = {
        k: (g.detach() if g is not None else torch.zeros_like(base[k])) for k, g in zip(names, grads)
    }

    def evaluate(name: str, flat_idx: int, delta: float) -> float:
        probe = dict(base)
        t = base[name].clone()
        t.view(-1)[flat_idx] += delta
        probe[name] = t
        with torch.no_grad():
            return float(_scalarize(fn(**probe)))

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        f0 = float(_scalarize(fn(**base))) if check_kinks else 0.0
    report = GradCheckReport(0.0)
    for name in names:
        n = base[name].numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        a = analytic[name].reshape(-1)[torch.as_tensor(idx)]
        num = torch.empty(len(idx), dtype=DTYPE)
        for j, i in enumerate(idx):
            fp = evaluate(name, int(i), eps)
            fm = evaluate(name, int(i), -eps)
            num[j] = (fp - fm) / (2 * eps)
            if check_kinks:
                fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
                if abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd), 1.0):
                    raise NonDifferentiablePoint(f"{name}[{int(i)}]: one-sided slopes {fwd:.4g} vs {bwd:.4g}")
        scale = max(float(a.abs().max()) if len(a) else 0.0, float(num.abs().max()) if len(num) else 0.0, 1e-10)
        err = float((a - num).abs().max()) / scale if len(a) else 0.0
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report
