"""Signed-gradient Linf attacks: FGSM, PGD, MI-FGSM and BPDA with an identity backward pass.

All of them share one update, ``x <- project(x + step * sign(g))``, and
differ only in where ``g`` comes from. ``sign(0) = 0`` everywhere.
"""

from __future__ import annotations

from typing import Callable

import torch

from capgan.attacks.targets import DifferentiableTarget
from capgan.core.seeding import torch_generator
from capgan.core.types import ImageBatch, Norm, PerturbationBudget


def project_linf(x_adv: torch.Tensor, x_ref: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp ``x_adv`` into ``[x_ref - eps, x_ref + eps]`` intersected with ``[0, 1]``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if x_adv.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(x_ref.shape)}")
    return torch.clamp(torch.minimum(torch.maximum(x_adv, x_ref - epsilon), x_ref + epsilon), 0.0, 1.0)


def _check_linf(budget: PerturbationBudget) -> None:
    if budget.norm is not Norm.LINF:
        raise ValueError(f"this attack needs a Linf budget, got {budget.norm.value}")


def _random_start(x: torch.Tensor, eps: float, generator: torch.Generator) -> torch.Tensor:
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
    return torch.clamp(x + eps * noise, 0.0, 1.0)


def fgsm(t: DifferentiableTarget, x: ImageBatch, budget: PerturbationBudget) -> ImageBatch:
    _check_linf(budget)
    _, grad = t.loss_and_gradient(x.pixels, x.labels)
    return x.with_pixels(project_linf(x.pixels + budget.radius * grad.sign(), x.pixels, budget.radius))


def pgd(
    t: DifferentiableTarget,
    x: ImageBatch,
    budget: PerturbationBudget,
    random_start: bool = True,
    generator: torch.Generator | None = None,
) -> ImageBatch:
    return _iterate(lambda xi: t.loss_and_gradient(xi, x.labels)[1], x, budget, random_start, generator)


def bpda_identity(
    purify: Callable[[torch.Tensor], torch.Tensor],
    t_inner: DifferentiableTarget,
    x: ImageBatch,
    budget: PerturbationBudget,
    random_start: bool = True,
    generator: torch.Generator | None = None,
) -> ImageBatch:
    """PGD through a purifier whose Jacobian is replaced by the identity.

    The gradient at ``x_i`` is that of the classifier loss evaluated at
    ``u = purify(x_i)``.
    """

    def grad(xi):
        with torch.no_grad():
            u = purify(xi)
        return t_inner.loss_and_gradient(u, x.labels)[1]

    return _iterate(grad, x, budget, random_start, generator)


def mi_fgsm(
    t: DifferentiableTarget,
    x: ImageBatch,
    budget: PerturbationBudget,
    mu: float = 1.0,
) -> ImageBatch:
    """Momentum iterative FGSM. The accumulator adds per-sample L1-normalised gradients."""
    _check_linf(budget)
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    x0 = x.pixels
    xi = x0
    g = torch.zeros_like(x0)
    for _ in range(budget.steps):
        _, grad = t.loss_and_gradient(xi, x.labels)
        l1 = grad.abs().flatten(1).sum(1).clamp_min(torch.finfo(grad.dtype).tiny)
        g = mu * g + grad / l1.view(-1, *([1] * (grad.dim() - 1)))
        xi = project_linf(xi + budget.step * g.sign(), x0, budget.radius)
    return x.with_pixels(xi)


def _iterate(grad_fn, x: ImageBatch, budget: PerturbationBudget, random_start: bool, generator) -> ImageBatch:
    _check_linf(budget)
    x0 = x.pixels
    if budget.radius == 0:
        return x.with_pixels(x0.clone())
    xi = x0
    if random_start:
        xi = _random_start(x0, budget.radius, generator or torch_generator("attack"))
    for _ in range(budget.steps):
        xi = project_linf(xi + budget.step * grad_fn(xi).sign(), x0, budget.radius)
    return x.with_pixels(xi)
