from capgan.attacks.cw import CWResult, cw_l2
from capgan.attacks.gradient import bpda_identity, fgsm, mi_fgsm, pgd, project_linf
from capgan.attacks.query import QueryAttackResult, spsa, spsa_gradient, square_attack, square_proposal
from capgan.attacks.registry import ATTACKS, AttackOutcome, AttackSpec, get_attack, run_attack
from capgan.attacks.targets import (
    AttackError,
    DifferentiableTarget,
    QueryLimitExceeded,
    QueryTarget,
    margin,
)

__all__ = [
    "ATTACKS",
    "AttackError",
    "AttackOutcome",
    "AttackSpec",
    "CWResult",
    "DifferentiableTarget",
    "QueryAttackResult",
    "QueryLimitExceeded",
    "QueryTarget",
    "bpda_identity",
    "cw_l2",
    "fgsm",
    "get_attack",
    "margin",
    "mi_fgsm",
    "pgd",
    "project_linf",
    "run_attack",
    "spsa",
    "spsa_gradient",
    "square_attack",
    "square_proposal",
]
