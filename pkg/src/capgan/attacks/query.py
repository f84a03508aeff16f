"""Score-based attacks that only see logits: SPSA and the Linf Square attack.

Both minimise the margin ``z_y - max_{j != y} z_j`` and stop on a sample as
soon as it is misclassified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from capgan.attacks.gradient import project_linf
from capgan.attacks.targets import QueryTarget, margin
from capgan.core.seeding import torch_generator
from capgan.core.types import ImageBatch, Norm, PerturbationBudget


@dataclass(frozen=True)
class QueryAttackResult:
    adversarial: ImageBatch
    queries: torch.Tensor  # per-sample queries used
    truncated: bool  # True if some sample ran out of queries before finishing


def _rademacher(shape, generator, dtype):
    return torch.randint(0, 2, shape, generator=generator).to(dtype) * 2 - 1


def spsa_gradient(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    spsa_batch: int,
    delta: float,
    generator: torch.Generator,
    chunk: int = 512,
) -> torch.Tensor:
    """Antithetic SPSA estimate of the gradient of a scalar-per-row ``loss_fn`` at ``x``.

    Uses ``spsa_batch // 2`` Rademacher directions ``v``, each evaluated at
    ``x + delta v`` and ``x - delta v``; the estimate is the mean of
    ``(L+ - L-) / (2 delta) * v``.
    """
    if spsa_batch < 2 or spsa_batch % 2:
        raise ValueError(f"spsa_batch must be a positive even number, got {spsa_batch}")
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    half = spsa_batch // 2
    v = _rademacher((half,) + tuple(x.shape), generator, x.dtype)
    est = torch.zeros_like(x)
    for start in range(0, half, chunk):
        vs = v[start:start + chunk]
        losses = loss_fn(torch.cat([x + delta * vs, x - delta * vs]))
        diff = (losses[:len(vs)] - losses[len(vs):]) / (2 * delta)
        est += (diff.view(-1, *([1] * x.dim())) * vs).sum(0)
    return est / half


def spsa(
    t: QueryTarget,
    x: ImageBatch,
    budget: PerturbationBudget,
    spsa_batch: int = 2048,
    iters: int = 100,
    delta: float = 0.01,
    lr: float = 0.01,
    query_limit: int | None = None,
    generator: torch.Generator | None = None,
) -> QueryAttackResult:
    """SPSA with Adam steps on the perturbation, projected onto the Linf ball each iteration.

    ``query_limit`` is a per-sample budget; every iteration costs one query
    for the current point plus ``spsa_batch`` for the estimate.
    """
    if budget.norm is not Norm.LINF:
        raise ValueError("spsa supports Linf budgets only")
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    generator = generator or torch_generator("spsa")
    eps = budget.radius
    out = x.pixels.clone()
    used = torch.zeros(len(x), dtype=torch.long)
    truncated = False

    for i in range(len(x)):
        x0 = x.pixels[i]
        y = x.labels[i:i + 1]

        def loss_fn(batch):
            return margin(t(batch), y.expand(batch.shape[0]))

        pert = torch.zeros_like(x0, requires_grad=True)
        opt = torch.optim.Adam([pert], lr=lr)
        best, best_loss = x0.clone(), math.inf
        for _ in range(iters):
            cost = 1 + spsa_batch
            if (query_limit is not None and used[i] + cost > query_limit) or t.remaining() < cost:
                truncated = True
                break
            xi = project_linf(x0 + pert.detach(), x0, eps)
            current = loss_fn(xi[None])[0].item()
            used[i] += 1
            if current < best_loss:
                best, best_loss = xi, current
            if current < 0:
                break
            grad = spsa_gradient(loss_fn, xi, spsa_batch, delta, generator)
            used[i] += spsa_batch
            opt.zero_grad()
            pert.grad = grad
            opt.step()
            with torch.no_grad():
                pert.copy_(project_linf(x0 + pert, x0, eps) - x0)
        out[i] = best
    return QueryAttackResult(x.with_pixels(out), used, truncated)


def square_schedule(p_init: float, it: int, n_queries: int) -> float:
    """Piecewise-constant decay of the square area fraction, rescaled to 10k queries."""
    it = int(it / n_queries * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32),
                       (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def square_proposal(x0, x_best, eps, size, generator):
    """Move one random ``size`` x ``size`` square per sample to ``x0 +- eps`` (sign per channel).

    Everything outside the square stays at ``x_best``. Returns the proposal
    and the (row, col) corner of each square.
    """
    n, h, w, c = x0.shape
    rows = torch.randint(0, h - size + 1, (n,), generator=generator)
    cols = torch.randint(0, w - size + 1, (n,), generator=generator)
    signs = _rademacher((n, 1, 1, c), generator, x0.dtype)
    r = torch.arange(h)
    q = torch.arange(w)
    mask = ((r[None, :] >= rows[:, None]) & (r[None, :] < rows[:, None] + size))[:, :, None] & \
           ((q[None, :] >= cols[:, None]) & (q[None, :] < cols[:, None] + size))[:, None, :]
    step = mask[..., None].to(x0.dtype) * (2 * eps) * signs
    return project_linf(x_best + step, x0, eps), torch.stack([rows, cols], 1)


def square_attack(
    t: QueryTarget,
    x: ImageBatch,
    budget: PerturbationBudget,
    restarts: int = 1,
    p_init: float = 0.05,
    query_cap: int = 5000,
    generator: torch.Generator | None = None,
    on_step: Callable[..., None] | None = None,
) -> QueryAttackResult:
    """Linf Square attack (random search over square patches).

    A proposal replaces the incumbent only if it strictly lowers the margin.
    ``query_cap`` is per sample and per restart. ``on_step`` receives a dict
    with the incumbent, proposal, losses and acceptance mask of every
    iteration, for inspection.
    """
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    if budget.norm is not Norm.LINF:
        raise ValueError("square_attack supports Linf budgets only")
    generator = generator or torch_generator("attack")
    eps = budget.radius
    x0_all, y_all = x.pixels, x.labels
    n, h, w, c = x0_all.shape
    best_all = x0_all.clone()
    best_loss_all = torch.full((n,), math.inf, dtype=x0_all.dtype)
    used = torch.zeros(n, dtype=torch.long)
    truncated = False

    for _ in range(restarts):
        todo = torch.nonzero(best_loss_all >= 0).flatten()
        if len(todo) == 0:
            break
        if t.remaining() < len(todo):
            truncated = True
            break
        x0, y = x0_all[todo], y_all[todo]
        stripes = _rademacher((len(todo), 1, w, c), generator, x0.dtype)
        x_best = torch.clamp(x0 + eps * stripes, 0.0, 1.0)
        loss = margin(t(x_best), y)
        used[todo] += 1
        spent = 1
        for it in range(query_cap - 1):
            active = torch.nonzero(loss >= 0).flatten()
            if len(active) == 0:
                break
            if t.remaining() < len(active):
                truncated = True
                break
            p = square_schedule(p_init, it, query_cap)
            size = min(max(int(round(math.sqrt(p * h * w))), 1), h - 1)
            proposal, corners = square_proposal(x0[active], x_best[active], eps, size, generator)
            new_loss = margin(t(proposal), y[active])
            used[todo[active]] += 1
            spent += 1
            accept = new_loss < loss[active]
            if on_step is not None:
                on_step({
                    "x0": x0[active], "incumbent": x_best[active], "proposal": proposal,
                    "size": size, "corners": corners, "eps": eps,
                    "loss": loss[active], "new_loss": new_loss, "accept": accept,
                })
            idx = active[accept]
            x_best[idx] = proposal[accept]
            loss[idx] = new_loss[accept]
        if spent >= query_cap and bool((loss >= 0).any()):
            truncated = True
        improved = loss < best_loss_all[todo]
        best_all[todo[improved]] = x_best[improved]
        best_loss_all[todo[improved]] = loss[improved]
    return QueryAttackResult(x.with_pixels(best_all), used, truncated)
