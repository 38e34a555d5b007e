"""Heatmap regression loss, contrastive losses, and the weighted total.

The cross-modality contrastive loss detaches the textual side, so visual
prototypes are pulled towards textual ones and never the other way round.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NumericError


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.002
    lambda3: float = 0.002
    tau: float = 0.05
    mse_reduction: str = "mean"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def _group_mse(group, gt):
    total = 0.0
    for pred, target in zip(group.maps, gt.maps):
        total = total + torch.mean((pred.grid - target.grid) ** 2)
    return total / len(group.maps)


def heatmap_loss(hv, ht, gt):
    """Mean over present modalities of per-pixel, per-keypoint MSE to GT."""
    if hv is None and ht is None:
        raise ValueError("at least one modality group must be present")
    terms = [_group_mse(g, gt) for g in (hv, ht) if g is not None]
    return sum(terms) / len(terms)


def _stack(prototypes):
    if len(prototypes) == 0:
        raise ValueError("empty prototype list")
    if isinstance(prototypes, torch.Tensor):
        return prototypes
    return torch.stack([p.vector if hasattr(p, "vector") else p for p in prototypes])


def similarity_matrix(a, b):
    """Pairwise cosine similarities between two equal-length prototype lists."""
    va, vb = _stack(a), _stack(b)
    if va.shape != vb.shape:
        raise ValueError("prototype lists differ in length or width")
    na = va.norm(dim=1, keepdim=True)
    nb = vb.norm(dim=1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise NumericError("zero-norm prototype in similarity matrix")
    return (va / na) @ (vb / nb).T


def _directional_ce(sim, tau):
    # Mean over rows of the diagonal negative log-softmax.
    logp = torch.log_softmax(sim / tau, dim=1)
    return -torch.diagonal(logp).mean()


def contrastive_tt(ts, ts2, tau):
    """Symmetric cross-species contrastive loss over textual prototypes.

    Diagonal entries are the positives; the loss averages the two
    directional cross-entropy terms.
    """
    sim = similarity_matrix(ts, ts2)
    return 0.5 * (_directional_ce(sim, tau) + _directional_ce(sim.T, tau))


def contrastive_vt(visual, textual, tau):
    """Cross-modality contrastive loss with stop-gradient on the textual side."""
    vt = _stack(textual).detach()
    return contrastive_tt(_stack(visual), vt, tau)


def total_loss(lkp, ltt, lvt, cfg):
    """Weighted sum of the three loss components."""
    return cfg.lambda1 * lkp + cfg.lambda2 * ltt + cfg.lambda3 * lvt
