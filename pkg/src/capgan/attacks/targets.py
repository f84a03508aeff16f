"""Model interfaces an attack may be handed.

A ``DifferentiableTarget`` exposes input gradients; a ``QueryTarget`` only
returns logits and counts every image it scores. Query-only attacks receive
the latter, so they cannot reach a gradient even by accident.
"""

from __future__ import annotations

import threading
from typing import Callable

import torch
import torch.nn.functional as F


class AttackError(RuntimeError):
    pass


class QueryLimitExceeded(AttackError):
    pass


def margin(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample ``z_y - max_{j != y} z_j``; negative means misclassified."""
    true = logits.gather(1, labels[:, None]).squeeze(1)
    other = logits.clone()
    other.scatter_(1, labels[:, None], float("-inf"))
    return true - other.max(dim=1).values


def cross_entropy_sum(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels, reduction="sum")


class DifferentiableTarget:
    def __init__(self, forward: Callable[[torch.Tensor], torch.Tensor]):
        self.forward = forward

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(x)

    def loss_and_gradient(self, x: torch.Tensor, labels: torch.Tensor, loss=cross_entropy_sum):
        """Return ``(loss, d loss / d x)``. Losses are summed over the batch so each
        sample's gradient does not depend on batch size."""
        x = x.detach().requires_grad_(True)
        with torch.enable_grad():
            value = loss(self.forward(x), labels)
            (grad,) = torch.autograd.grad(value, x)
        if not torch.isfinite(grad).all():
            raise AttackError(f"non-finite input gradient (loss={value.item():.6g})")
        return value.detach(), grad


class QueryTarget:
    """Logits-only oracle with an atomic query counter.

    ``limit`` caps the total number of scored images; a call that would
    exceed it raises ``QueryLimitExceeded`` without being evaluated.
    """

    def __init__(self, forward: Callable[[torch.Tensor], torch.Tensor], limit: int | None = None):
        self._forward = forward
        self.limit = limit
        self.queries = 0
        self._lock = threading.Lock()

    def remaining(self) -> float:
        return float("inf") if self.limit is None else self.limit - self.queries

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        with self._lock:
            if self.limit is not None and self.queries + x.shape[0] > self.limit:
                raise QueryLimitExceeded(
                    f"query limit {self.limit} reached ({self.queries} used, {x.shape[0]} requested)"
                )
            self.queries += x.shape[0]
        with torch.no_grad():
            return self._forward(x)
