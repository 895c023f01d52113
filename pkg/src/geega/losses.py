"""Loss terms and pairwise gradient alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch.nn import functional as F

from .diffcore import ContractError, unflatten

SITES = ("topo", "spectro", "gcn")
TERMS = tuple(f"{kind}_{site}" for kind in ("git", "bce") for site in SITES)
PAIRS = ("GCN-topo", "GCN-spectro")


def _check_binary(labels: torch.Tensor):
    if labels.numel() and not torch.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0 or 1")


def bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on raw logits (log-sum-exp stable form)."""
    logits = logits.reshape(-1)
    labels = torch.as_tensor(labels).reshape(-1)
    _check_binary(labels)
    if logits.shape != labels.shape:
        raise ContractError(f"{logits.numel()} logits for {labels.numel()} labels")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def git_loss(emb: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Center term plus cross-class pairwise repulsion.

    ``0.5 * sum_i |e_i - c_{y_i}|^2 + sum_{i != j, y_i != y_j} 1 / (1 + |e_i - c_{y_j}|^2)``.
    Centers are treated as constants; update them with :func:`update_centers`.
    """
    labels = torch.as_tensor(labels).reshape(-1).long()
    _check_binary(labels)
    centers = centers.detach().to(emb.dtype)
    d2 = ((emb[:, None, :] - centers[None, :, :]) ** 2).sum(-1)  # [n, classes]
    own = F.one_hot(labels, centers.shape[0]).to(emb.dtype)
    center_term = 0.5 * (d2 * own).sum()
    counts = own.sum(0)  # samples per class
    # sample i meets each of the counts[k] samples of every other class k
    pair_weight = (1.0 - own) * counts[None, :]
    pair_term = (pair_weight / (1.0 + d2)).sum()
    return center_term + pair_term


@torch.no_grad()
def update_centers(centers: torch.Tensor, emb: torch.Tensor, labels, rate: float = 0.5) -> None:
    """In-place moving average of each class center toward its batch mean."""
    labels = torch.as_tensor(labels).reshape(-1).long()
    for k in range(centers.shape[0]):
        mask = labels == k
        if mask.any():
            centers[k] += rate * (emb[mask].mean(0).to(centers.dtype) - centers[k])


@dataclass
class ParetoWeights:
    alpha_gcn: float
    alpha_other: float


@dataclass
class ConflictRecord:
    epoch: int
    batch: int
    pair: str
    cosine: float
    conflict: bool
    degenerate: bool = False


def _as64(g) -> torch.Tensor:
    return torch.as_tensor(g).detach().reshape(-1).to(torch.float64)


def detect_conflict(g1, g2, *, epoch=0, batch=0, pair="") -> ConflictRecord:
    a, b = _as64(g1), _as64(g2)
    if a.shape != b.shape:
        raise ContractError(f"gradient lengths differ: {a.numel()} vs {b.numel()}")
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        return ConflictRecord(epoch, batch, pair, 0.0, True, degenerate=True)
    cos = float(torch.clamp((a @ b) / (na * nb), -1.0, 1.0))
    return ConflictRecord(epoch, batch, pair, cos, cos <= 0.0)


def pareto_weights(g1, g2) -> ParetoWeights:
    """Closed-form minimiser of ``|a g1 + (1 - a) g2|^2`` over ``a`` in [0, 1]."""
    a, b = _as64(g1), _as64(g2)
    if a.shape != b.shape:
        raise ContractError(f"gradient lengths differ: {a.numel()} vs {b.numel()}")
    diff = a - b
    denom = float(diff @ diff)
    if denom == 0.0:
        return ParetoWeights(0.5, 0.5)
    alpha = float((b - a) @ b) / denom
    alpha = min(max(alpha, 0.0), 1.0)
    return ParetoWeights(alpha, 1.0 - alpha)


def aligned_gradient(g_gcn, g_other, w: ParetoWeights) -> torch.Tensor:
    if w.alpha_gcn < 0 or w.alpha_other < 0 or not math.isclose(w.alpha_gcn + w.alpha_other, 1.0, abs_tol=1e-12):
        raise ContractError(f"invalid Pareto weights {w}")
    g_gcn, g_other = torch.as_tensor(g_gcn), torch.as_tensor(g_other)
    return 2.0 * w.alpha_gcn * g_gcn + 2.0 * w.alpha_other * g_other


def align_pair(g_gcn, g_other, *, enabled=True, epoch=0, batch=0, pair=""):
    """Update direction for a shared parameter subset.

    Returns ``(h, weights, record)``. Alignment only fires for conflicting
    pairs; otherwise the weights are (0.5, 0.5) and ``h`` is the plain sum.
    """
    record = detect_conflict(g_gcn, g_other, epoch=epoch, batch=batch, pair=pair)
    if enabled and record.conflict:
        w = pareto_weights(g_gcn, g_other)
    else:
        w = ParetoWeights(0.5, 0.5)
    dtype = torch.as_tensor(g_gcn).dtype
    h = aligned_gradient(_as64(g_gcn), _as64(g_other), w).to(dtype)
    return h, w, record


def check_min_norm(h, g1, g2, tol=1e-9) -> None:
    """Assert the min-norm properties of an aligned direction (float64)."""
    h, a, b = _as64(h), _as64(g1), _as64(g2)
    half = float(torch.linalg.vector_norm(h)) / 2.0
    bound = min(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b)))
    scale = max(1.0, float(torch.linalg.vector_norm(h)) * max(float(torch.linalg.vector_norm(a)),
                                                               float(torch.linalg.vector_norm(b))))
    if half > bound + tol * max(1.0, bound):
        raise AssertionError(f"aligned direction longer than both gradients: {half} > {bound}")
    if float(h @ a) < -tol * scale or float(h @ b) < -tol * scale:
        raise AssertionError("aligned direction increases one of the objectives")


def apply_update(params, h, lr=None, optimizer=None) -> None:
    """Write ``h`` as the gradient of ``params``; step with SGD (``lr``) or ``optimizer``."""
    params = list(params)
    h = torch.as_tensor(h)
    grads = unflatten(h, params)
    if optimizer is None:
        if lr is None:
            raise ContractError("apply_update needs lr or an optimizer")
        with torch.no_grad():
            for p, g in zip(params, grads):
                p -= lr * g
        return
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    optimizer.step()


def total_loss(parts: dict, required=TERMS):
    """Unit-weight sum of the loss terms plus a per-term float breakdown.

    Alignment contributes no scalar: it acts by replacing shared-subset gradients.
    """
    missing = [t for t in required if t not in parts]
    if missing:
        raise ContractError(f"missing loss terms: {missing}")
    unknown = [t for t in parts if t not in TERMS]
    if unknown:
        raise ContractError(f"unknown loss terms: {unknown}")
    names = [t for t in TERMS if t in parts]
    total = sum(parts[t] for t in names)
    return total, {t: float(parts[t].detach()) if torch.is_tensor(parts[t]) else float(parts[t]) for t in names}
