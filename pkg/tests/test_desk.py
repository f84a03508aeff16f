"""Desk-scale measurements on the real 3-class CIFAR-10 subset (slow)."""

import pytest
import torch

from capgan.classifier import Schedule, accuracy, adversarial_train
from capgan.core.types import Knowledge, PerturbationBudget, ThreatModel
from capgan.evalharness import DefensePipeline, epsilon_sweep, evaluate
from capgan.purifier import count_parameters
from capgan.training import purify

pytestmark = pytest.mark.desk


def test_desk_classifier_clean_accuracy(desk):
    assert accuracy(desk.f, desk.test) >= 85.0


def test_fgsm_domain_hurts_classifier(desk):
    d = desk.domains
    clean = accuracy(desk.f, d.clean)
    adv = accuracy(desk.f, d.adversarial)
    assert clean - adv >= 30.0
    assert (d.adversarial.pixels - d.clean.pixels).abs().max() <= 8 / 255 + 1e-7


def test_undefended_transfer_sweep_is_monotone(desk):
    pipe = DefensePipeline.undefended(desk.f, desk.surrogate)
    recs = epsilon_sweep(pipe, desk.test, "pgd7", [0, 4, 8, 12, 16, 32], Knowledge.BLACK_BOX_TRANSFER, seed=desk.seed)
    acc = [r.accuracy for r in recs]
    assert acc[0] == recs[0].clean_accuracy
    assert all(b <= a for a, b in zip(acc, acc[1:])), acc


def test_logit_space_gap_exceeds_pixel_space_gap(desk):
    from capgan.attacks import DifferentiableTarget, fgsm

    x = desk.test
    adv = fgsm(DifferentiableTarget(desk.f), x, PerturbationBudget(16))
    with torch.no_grad():
        zc, za = desk.f(x.pixels), desk.f(adv.pixels)
    # relative distance between the two domains, per space
    pix = (adv.pixels - x.pixels).flatten(1).norm(dim=1).mean() / x.pixels.flatten(1).norm(dim=1).mean()
    logit = (za - zc).norm(dim=1).mean() / zc.norm(dim=1).mean()
    assert logit > pix


def test_adversarial_training_beats_standard_under_pgd40(desk):
    cfg = desk.config.classifier
    at = adversarial_train(desk.train, PerturbationBudget(8, step_size=2, steps=7), Schedule.from_config(cfg),
                           seed=desk.seed)
    tm = ThreatModel(Knowledge.WHITE_BOX_TARGET, PerturbationBudget(8))
    std = evaluate(DefensePipeline.undefended(desk.f), desk.test, "pgd40", tm, seed=desk.seed)
    rob = evaluate(DefensePipeline.undefended(at), desk.test, "pgd40", tm, seed=desk.seed)
    assert rob.accuracy - std.accuracy >= 30.0, (std.accuracy, rob.accuracy)


def test_trained_discriminator_prefers_real_clean_images(desk):
    pair = desk.purifier("full").pair
    x = desk.test.pixels[:200]
    xa = desk.domains.adversarial.pixels[:200]
    with torch.no_grad():
        real = pair.disc_C(x)[0].mean()
        fake = pair.disc_C(purify(pair, xa))[0].mean()
    assert real > fake


def test_desk_generator_within_parameter_budget(desk):
    pair = desk.purifier("full").pair
    assert count_parameters(pair.gen_A2C) < 2_000_000
