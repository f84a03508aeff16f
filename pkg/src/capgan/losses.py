"""Terms of the purifier objective and their weighted combination.

Conventions:

* LSGAN: discriminators push real scores to 1 and fake scores to 0, the
  generators push fake scores to 1.
* The generator-side CAM term is a symmetric binary cross-entropy on the
  generators' own domain classifiers.
* The semantic term is ``T^2 * KL(p(z_real) || p(z_fake))`` with the real
  logits detached, so the classifier never receives gradients through it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from capgan.core.types import ImageBatch

GEN_TERMS = ("gan", "identity", "cycle", "cam_G", "cam_D", "semantic")
DISC_TERMS = ("disc_gan", "disc_cam")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, ImageBatch):
        return x.pixels
    return getattr(x, "logits", x)


def _nonempty(*tensors):
    for t in tensors:
        if t is not None and t.numel() == 0:
            raise ValueError("empty score batch")


def lsgan_loss(real_scores: torch.Tensor | None, fake_scores: torch.Tensor, side: str) -> torch.Tensor:
    """Least-squares GAN loss, averaged over batch and spatial positions.

    ``side="discriminator"``: ``mean((real - 1)^2) + mean(fake^2)``.
    ``side="generator"``: ``mean((fake - 1)^2)``; ``real_scores`` is ignored.
    """
    if side == "discriminator":
        if real_scores is None:
            raise ValueError("the discriminator side needs real scores")
        _nonempty(real_scores, fake_scores)
        return (real_scores - 1).pow(2).mean() + fake_scores.pow(2).mean()
    if side == "generator":
        _nonempty(fake_scores)
        return (fake_scores - 1).pow(2).mean()
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def _l1(a, b) -> torch.Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def identity_loss(output, original) -> torch.Tensor:
    """Mean absolute difference between a same-domain translation and its input."""
    return _l1(output, original)


def cycle_loss(reconstructed, original) -> torch.Tensor:
    """Mean absolute difference between a round-trip translation and its input."""
    return _l1(reconstructed, original)


def cam_loss_discriminator(eta_real: torch.Tensor, eta_fake: torch.Tensor) -> torch.Tensor:
    return lsgan_loss(eta_real, eta_fake, "discriminator")


def cam_loss_generator(eta_source: torch.Tensor, eta_other: torch.Tensor | None = None, eps: float = 1e-7) -> torch.Tensor:
    """BCE that drives a generator's domain probability to 1 on its source domain
    and to 0 on the other one. Inputs are probabilities, not logits."""
    total = eta_source.new_zeros(())
    for probs, target in ((eta_source, 1.0), (eta_other, 0.0)):
        if probs is None:
            continue
        _nonempty(probs)
        if not torch.isfinite(probs).all() or probs.min() < 0 or probs.max() > 1:
            raise ValueError("domain probabilities must lie in [0, 1]")
        p = probs.clamp(eps, 1 - eps)
        total = total - (torch.log(p) if target == 1.0 else torch.log1p(-p)).mean()
    return total


def semantic_loss(z_real, z_fake, T: float) -> torch.Tensor:
    """``T^2`` times the mean row-wise ``KL(softmax(z_real/T) || softmax(z_fake/T))``."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z_real, z_fake = _tensor(z_real).detach(), _tensor(z_fake)
    if z_real.shape != z_fake.shape:
        raise ValueError(f"logit shape mismatch: {tuple(z_real.shape)} vs {tuple(z_fake.shape)}")
    log_p = F.log_softmax(z_real / T, dim=-1)
    log_q = F.log_softmax(z_fake / T, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(-1)
    return T * T * kl.mean()


def total_objective(terms: Mapping[str, torch.Tensor], alpha: float):
    """Combine weighted terms into ``(generator_total, discriminator_total)``.

    Generator: ``alpha * (gan + identity + cycle) + (1 - alpha) * (cam_G + cam_D + semantic)``.
    Discriminator: ``alpha * disc_gan + (1 - alpha) * disc_cam``. Missing terms count as 0.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    get = lambda k: terms.get(k, 0.0)  # noqa: E731
    pixel = get("gan") + get("identity") + get("cycle")
    feature = get("cam_G") + get("cam_D") + get("semantic")
    gen = alpha * pixel + (1 - alpha) * feature
    disc = alpha * get("disc_gan") + (1 - alpha) * get("disc_cam")
    return gen, disc


@dataclass(frozen=True)
class LossReport:
    gan: float
    identity: float
    cycle: float
    cam_G: float
    cam_D: float
    semantic: float
    pixel_total: float
    feature_total: float
    cap_total: float
    disc_gan: float = 0.0
    disc_cam: float = 0.0
    disc_total: float = 0.0

    @classmethod
    def from_terms(cls, terms: Mapping[str, torch.Tensor | float], alpha: float) -> "LossReport":
        v = {k: float(terms.get(k, 0.0)) for k in GEN_TERMS + DISC_TERMS}
        pixel = v["gan"] + v["identity"] + v["cycle"]
        feature = v["cam_G"] + v["cam_D"] + v["semantic"]
        report = cls(
            **v,
            pixel_total=pixel,
            feature_total=feature,
            cap_total=alpha * pixel + (1 - alpha) * feature,
            disc_total=alpha * v["disc_gan"] + (1 - alpha) * v["disc_cam"],
        )
        bad = [k for k, x in report.as_dict().items() if not math.isfinite(x)]
        if bad:
            raise FloatingPointError(f"non-finite loss terms: {', '.join(bad)}")
        return report

    def as_dict(self) -> dict[str, float]:
        return asdict(self)
