"""Carlini-Wagner L2 attack (untargeted, confidence kappa)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from capgan.attacks.targets import AttackError, DifferentiableTarget, margin
from capgan.core.types import ImageBatch


@dataclass(frozen=True)
class CWResult:
    adversarial: ImageBatch
    success: torch.Tensor  # bool (B,), True where the returned sample has margin <= -kappa
    l2: torch.Tensor


def cw_l2(
    t: DifferentiableTarget,
    x: ImageBatch,
    kappa: float = 20.0,
    steps: int = 1000,
    c_range: tuple[float, float] = (1e-3, 1e2),
    search_steps: int = 5,
    lr: float = 1e-2,
) -> CWResult:
    """Minimise ``||delta||^2 + c * max(z_y - max_{j!=y} z_j, -kappa)`` in tanh space.

    ``c`` is bisected per sample in log space over ``c_range``. Samples never
    pushed to a margin of ``-kappa`` are returned unchanged with
    ``success=False``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    x0, y = x.pixels, x.labels
    n = x0.shape[0]
    reduce_dims = tuple(range(1, x0.dim()))

    best = x0.clone()
    best_l2 = torch.full((n,), math.inf, dtype=x0.dtype)
    # already misclassified with enough confidence: zero perturbation is optimal
    done = margin(t.logits(x0), y) <= -kappa
    best_l2[done] = 0.0

    lo = torch.full((n,), math.log(c_range[0]), dtype=x0.dtype)
    hi = torch.full((n,), math.log(c_range[1]), dtype=x0.dtype)
    w0 = torch.atanh((2 * x0 - 1) * (1 - 1e-6))
    for _ in range(search_steps):
        c = torch.exp((lo + hi) / 2)
        w = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=lr)
        found = torch.zeros(n, dtype=torch.bool)
        for _ in range(steps):
            with torch.enable_grad():
                x_adv = (torch.tanh(w) + 1) / 2
                l2 = (x_adv - x0).pow(2).sum(reduce_dims)
                m = margin(t.forward(x_adv), y)
                loss = (l2 + c * torch.clamp(m, min=-kappa)).sum()
                if not torch.isfinite(loss):
                    raise AttackError(f"CW loss became {loss.item()}")
                opt.zero_grad()
                loss.backward()
            opt.step()
            with torch.no_grad():
                ok = (m <= -kappa) & ~done
                better = ok & (l2 < best_l2)
                best[better] = x_adv.detach()[better]
                best_l2[better] = l2.detach()[better]
                found |= ok
        hi = torch.where(found, torch.log(c), hi)
        lo = torch.where(found, lo, torch.log(c))

    best = best.clamp(0.0, 1.0)
    success = torch.isfinite(best_l2) & (margin(t.logits(best), y) <= -kappa)
    best = torch.where(success.view(-1, *([1] * (x0.dim() - 1))), best, x0)
    return CWResult(x.with_pixels(best), success, torch.where(success, best_l2, torch.zeros_like(best_l2)))
