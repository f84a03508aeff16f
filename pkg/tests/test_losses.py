import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capgan.classifier import soft_targets
from capgan.core.types import ImageBatch
from capgan.losses import (
    LossReport,
    cam_loss_discriminator,
    cam_loss_generator,
    cycle_loss,
    identity_loss,
    lsgan_loss,
    semantic_loss,
    total_objective,
)


def kl_by_hand(zp, zq, T):
    def sm(z):
        e = [math.exp(v / T) for v in z]
        return [v / sum(e) for v in e]

    p, q = sm(zp), sm(zq)
    return sum(a * math.log(a / b) for a, b in zip(p, q))


# ---------------------------------------------------------------- LSGAN

def test_lsgan_perfect_discriminator_and_generator():
    assert lsgan_loss(torch.ones(4, 8, 8), torch.zeros(4, 8, 8), "discriminator").item() == 0.0
    assert lsgan_loss(None, torch.ones(4, 8, 8), "generator").item() == 0.0


def test_lsgan_half_scores():
    assert lsgan_loss(torch.full((3,), 0.5), torch.full((3,), 0.5), "discriminator").item() == pytest.approx(0.5, abs=1e-6)


def test_lsgan_errors():
    with pytest.raises(ValueError):
        lsgan_loss(torch.ones(2), torch.zeros(2), "both")
    with pytest.raises(ValueError):
        lsgan_loss(torch.ones(0), torch.zeros(0), "discriminator")
    with pytest.raises(ValueError):
        lsgan_loss(None, torch.zeros(2), "discriminator")


@settings(max_examples=100, deadline=None)
@given(arrays("float64", 6, elements=st.floats(-3, 3)), arrays("float64", 6, elements=st.floats(-3, 3)))
def test_lsgan_matches_brute_force(real, fake):
    expected = sum((r - 1) ** 2 for r in real) / 6 + sum(f * f for f in fake) / 6
    got = lsgan_loss(torch.from_numpy(real), torch.from_numpy(fake), "discriminator").item()
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)
    assert lsgan_loss(None, torch.from_numpy(fake), "generator").item() >= 0


# ---------------------------------------------------------------- L1

def test_identity_loss_values():
    x = torch.rand(2, 4, 4, 3)
    assert identity_loss(x, x).item() == 0.0
    y = torch.rand(2, 4, 4, 3) * 0.5
    assert identity_loss(y + 0.1, y).item() == pytest.approx(0.1, abs=1e-6)
    assert cycle_loss(ImageBatch(y, torch.zeros(2, dtype=torch.long)), y + 0.1).item() == pytest.approx(0.1, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays("float64", (2, 3), elements=st.floats(0, 1)), arrays("float64", (2, 3), elements=st.floats(0, 1)))
def test_l1_symmetric(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    assert identity_loss(a, b).item() == identity_loss(b, a).item()
    assert cycle_loss(a, b).item() == identity_loss(a, b).item()


def test_l1_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        identity_loss(torch.zeros(2, 3), torch.zeros(3, 2))


# ---------------------------------------------------------------- CAM

def test_cam_generator_values():
    assert cam_loss_generator(torch.ones(4), torch.zeros(4)).item() == pytest.approx(0.0, abs=1e-6)
    half = torch.full((4,), 0.5)
    assert cam_loss_generator(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert cam_loss_generator(torch.tensor([0.9])).item() == pytest.approx(-math.log(0.9), abs=1e-6)
    assert abs(-math.log(0.9) - 0.1054) < 1e-4


def test_cam_generator_rejects_logits():
    with pytest.raises(ValueError):
        cam_loss_generator(torch.tensor([1.5]))


def test_cam_discriminator_mirrors_lsgan():
    assert cam_loss_discriminator(torch.ones(3), torch.zeros(3)).item() == 0.0
    assert cam_loss_discriminator(torch.full((3,), 0.5), torch.full((3,), 0.5)).item() == pytest.approx(0.5)


# ---------------------------------------------------------------- softmax / semantic

def test_soft_targets_hand_values():
    assert torch.allclose(soft_targets(torch.zeros(1, 4), 3.0), torch.full((1, 4), 0.25))
    p1 = soft_targets(torch.tensor([[2.0, 0.0]], dtype=torch.float64), 1.0)[0].tolist()
    assert p1 == pytest.approx([0.8807970779778823, 0.11920292202211755], abs=1e-6)
    assert p1 == pytest.approx([0.8808, 0.1192], abs=1e-4)
    p10 = soft_targets(torch.tensor([[2.0, 0.0]], dtype=torch.float64), 10.0)[0].tolist()
    assert p10 == pytest.approx([0.5498, 0.4502], abs=1e-4)


def test_soft_targets_flatten_with_temperature():
    z = torch.tensor([[3.0, -1.0, 0.5]], dtype=torch.float64)
    maxes = [soft_targets(z, T).max().item() for T in (0.5, 1, 2, 5, 10, 100, 1e4)]
    assert all(a > b for a, b in zip(maxes, maxes[1:]))
    assert maxes[-1] == pytest.approx(1 / 3, abs=1e-3)
    with pytest.raises(ValueError):
        soft_targets(z, 0)


def test_semantic_loss_identity_is_zero():
    z = torch.randn(5, 3)
    assert semantic_loss(z, z.clone(), 10.0).item() == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("T", [1.0, 10.0])
def test_semantic_loss_two_class_hand_oracle(T):
    zr = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
    zf = torch.zeros(1, 2, dtype=torch.float64)
    assert semantic_loss(zr, zf, T).item() == pytest.approx(T * T * kl_by_hand([2, 0], [0, 0], T), abs=1e-6)


def test_semantic_loss_detaches_real_side():
    zr = torch.randn(3, 4, requires_grad=True)
    zf = torch.randn(3, 4, requires_grad=True)
    semantic_loss(zr, zf, 2.0).backward()
    assert zr.grad is None and zf.grad is not None


def test_semantic_loss_errors():
    with pytest.raises(ValueError):
        semantic_loss(torch.zeros(1, 2), torch.zeros(1, 2), 0)
    with pytest.raises(ValueError):
        semantic_loss(torch.zeros(1, 2), torch.zeros(1, 3), 1)


# ---------------------------------------------------------------- combination

def test_total_objective_boundaries_and_hand_value():
    t = {"gan": torch.tensor(1.0), "identity": torch.tensor(0.5), "cycle": torch.tensor(0.5),
         "semantic": torch.tensor(1.0)}
    assert total_objective(t, 1.0)[0].item() == 2.0
    assert total_objective(t, 0.0)[0].item() == 1.0
    assert total_objective(t, 0.7)[0].item() == pytest.approx(1.7, abs=1e-6)
    with pytest.raises(ValueError):
        total_objective(t, 1.2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=8, max_size=8), st.floats(0, 1))
def test_loss_report_totals_consistent(vals, alpha):
    keys = ("gan", "identity", "cycle", "cam_G", "cam_D", "semantic", "disc_gan", "disc_cam")
    r = LossReport.from_terms(dict(zip(keys, vals)), alpha)
    assert r.pixel_total == pytest.approx(r.gan + r.identity + r.cycle)
    assert r.feature_total == pytest.approx(r.cam_G + r.cam_D + r.semantic)
    assert r.cap_total == pytest.approx(alpha * r.pixel_total + (1 - alpha) * r.feature_total)
    if alpha == 1.0:
        assert r.cap_total == r.pixel_total
    if alpha == 0.0:
        assert r.cap_total == r.feature_total


def test_loss_report_names_non_finite_term():
    with pytest.raises(FloatingPointError, match="semantic"):
        LossReport.from_terms({"semantic": float("nan")}, 0.7)
