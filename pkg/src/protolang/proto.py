"""Prototypes, scaled-cosine classification and the episodic loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

COSINE_EPS = 1e-8


@dataclass
class PrototypeBatch:
    prototypes: torch.Tensor  # (N, d)
    kind: str = "support_only"  # or "hybrid"

    def __len__(self):
        return self.prototypes.shape[0]


class Temperature(nn.Module):
    """Positive learnable scale stored as its logarithm."""

    def __init__(self, init: float = 1.0):
        super().__init__()
        if init <= 0:
            raise ValueError("temperature must be positive")
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self):
        return self.tau


def compute_prototypes(support: torch.Tensor, kind: str = "support_only") -> PrototypeBatch:
    """Mean of the K support embeddings per class; ``support`` is (N, K, d)."""
    if support.dim() != 3 or support.shape[1] < 1:
        raise ValueError(f"support embeddings must be (N, K>=1, d), got {tuple(support.shape)}")
    return PrototypeBatch(support.mean(dim=1), kind)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Pairwise cosine similarity (A, d) x (B, d) -> (A, B) with a guarded denominator."""
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    degenerate = int((na < eps).sum()) + int((nb < eps).sum())
    if degenerate:
        log.warning("cosine: %d zero-norm embedding(s) guarded with eps=%g", degenerate, eps)
    return (a / na.clamp_min(eps)) @ (b / nb.clamp_min(eps)).T


def logits(query: torch.Tensor, prototypes: PrototypeBatch | torch.Tensor, tau) -> torch.Tensor:
    protos = prototypes.prototypes if isinstance(prototypes, PrototypeBatch) else prototypes
    return tau * cosine_matrix(query, protos)


def classify(query: torch.Tensor, prototypes: PrototypeBatch | torch.Tensor, tau) -> torch.Tensor:
    """Softmax over tau-scaled cosine similarities, (Q, d) -> (Q, N) probabilities."""
    return F.softmax(logits(query, prototypes, tau), dim=-1)


def predict(probabilities: torch.Tensor) -> torch.Tensor:
    """Argmax class slot; ties resolve to the lowest index."""
    return probabilities.argmax(dim=-1)


def episodic_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class slot."""
    picked = probabilities.gather(1, labels.view(-1, 1)).squeeze(1)
    return -picked.clamp_min(torch.finfo(probabilities.dtype).tiny).log().mean()


def episodic_loss_from_logits(logit_rows: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Same quantity as ``episodic_loss(softmax(logits))`` computed stably."""
    return F.cross_entropy(logit_rows, labels)
