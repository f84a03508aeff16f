"""Canonical attack ids, their budgets and the model interface each one needs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from capgan.attacks.cw import cw_l2
from capgan.attacks.gradient import bpda_identity, fgsm, mi_fgsm, pgd
from capgan.attacks.query import spsa, square_attack
from capgan.attacks.targets import DifferentiableTarget, QueryTarget
from capgan.core.types import ImageBatch, Norm, PerturbationBudget

GRADIENT = "gradient"
QUERY = "query"
BPDA = "bpda"


@dataclass(frozen=True)
class AttackSpec:
    name: str
    interface: str
    steps: int = 1
    step_size: float | None = None  # None: derived from epsilon, see ``budget``
    norm: Norm = Norm.LINF

    def budget(self, epsilon: float) -> PerturbationBudget:
        if self.step_size is not None:
            step = self.step_size
        else:
            step = epsilon / self.steps if epsilon > 0 else 1.0
        return PerturbationBudget(epsilon, self.norm, step, self.steps)


ATTACKS: dict[str, AttackSpec] = {
    "fgsm": AttackSpec("fgsm", GRADIENT),
    "pgd7": AttackSpec("pgd7", GRADIENT, 7, 2.0),
    "pgd40": AttackSpec("pgd40", GRADIENT, 40, 2.0),
    "mifgsm20": AttackSpec("mifgsm20", GRADIENT, 20),
    "cw": AttackSpec("cw", GRADIENT, 1000, norm=Norm.L2),
    "bpda_i40": AttackSpec("bpda_i40", BPDA, 40, 2.0),
    "spsa": AttackSpec("spsa", QUERY, 100),
    "square_r1": AttackSpec("square_r1", QUERY),
    "square_r5": AttackSpec("square_r5", QUERY),
}


def get_attack(name: str) -> AttackSpec:
    try:
        return ATTACKS[name]
    except KeyError:
        raise KeyError(f"unknown attack {name!r}; known: {', '.join(ATTACKS)}") from None


@dataclass(frozen=True)
class AttackOutcome:
    adversarial: ImageBatch
    truncated: bool = False
    queries: int = 0


def run_attack(
    name: str,
    target: DifferentiableTarget | QueryTarget,
    x: ImageBatch,
    epsilon: float,
    *,
    generator: torch.Generator | None = None,
    purify: Callable[[torch.Tensor], torch.Tensor] | None = None,
    query_limit: int | None = None,
    random_start: bool = True,
) -> AttackOutcome:
    """Dispatch ``name`` on ``target``.

    Gradient attacks and BPDA need a ``DifferentiableTarget`` (for BPDA, over
    the bare classifier, with ``purify`` supplying the forward pass); query
    attacks need a ``QueryTarget``. ``query_limit`` is per image.
    """
    spec = get_attack(name)
    expected = QueryTarget if spec.interface == QUERY else DifferentiableTarget
    if not isinstance(target, expected):
        raise TypeError(f"attack {name!r} needs a {expected.__name__}, got {type(target).__name__}")
    budget = spec.budget(epsilon)
    if name == "fgsm":
        return AttackOutcome(fgsm(target, x, budget))
    if name in ("pgd7", "pgd40"):
        return AttackOutcome(pgd(target, x, budget, random_start=random_start, generator=generator))
    if name == "mifgsm20":
        return AttackOutcome(mi_fgsm(target, x, budget))
    if name == "cw":
        return AttackOutcome(cw_l2(target, x, steps=spec.steps).adversarial)
    if name == "bpda_i40":
        if purify is None:
            raise TypeError("bpda_i40 needs a purify callable")
        return AttackOutcome(bpda_identity(purify, target, x, budget, random_start=random_start, generator=generator))
    if name == "spsa":
        res = spsa(target, x, budget, iters=spec.steps, query_limit=query_limit, generator=generator)
    else:
        restarts = 1 if name == "square_r1" else 5
        cap = 5000 if query_limit is None else max(query_limit // restarts, 1)
        res = square_attack(target, x, budget, restarts=restarts, query_cap=cap, generator=generator)
    return AttackOutcome(res.adversarial, res.truncated, int(res.queries.sum()))
