import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from capgan.core.config import ArchConfig
from capgan.core.types import ImageBatch
from capgan.purifier import (
    Discriminator,
    Generator,
    build_purifier,
    cam_attention,
    count_parameters,
    discriminator_forward,
    export_attention,
    generator_forward,
)

TINY = {"base_channels": 2, "n_downsampling": 1, "n_res_blocks": 1, "disc_channels": 2}


def test_cam_attention_hand_weighted_sum():
    # two channels forming the identity pattern at each of 2x2 locations: f1 = [[1,0],[0,1]], f2 = 1 - f1
    f1 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    feats = torch.stack([f1, 1 - f1])[None]
    attended, heat = cam_attention(feats, torch.tensor([2.0, 1.0]))
    assert torch.equal(heat[0], 2 * f1 + 1 * (1 - f1))
    assert torch.equal(attended[0, 0], 2 * f1)
    with pytest.raises(ValueError):
        cam_attention(feats, torch.ones(3))


@pytest.mark.parametrize("residual", [True, False])
def test_untrained_generator_range_and_shapes(residual):
    g = Generator(4, 2, 1, residual)
    x = ImageBatch(torch.rand(3, 32, 32, 3), torch.zeros(3, dtype=torch.long))
    out = generator_forward(g, x)
    assert out.translated.pixels.shape == (3, 32, 32, 3)
    assert out.domain_logit.shape == (3,) and out.attention.shape == (3, 8, 8)
    assert out.translated.pixels.min() >= 0 and out.translated.pixels.max() <= 1


def test_residual_generator_starts_near_identity():
    g = Generator(4, 2, 1, residual=True)
    x = torch.rand(2, 32, 32, 3) * 0.99 + 0.005
    assert (g(x)[0] - x).abs().max() < 1e-5


def test_generator_rejects_nchw():
    with pytest.raises(ValueError, match="expected input"):
        Generator(2, 1, 1)(torch.rand(1, 3, 32, 32))


def test_discriminator_shapes_and_batch_independence():
    d = Discriminator(4)
    x = torch.rand(2, 32, 32, 3)
    xx = torch.cat([x[:1], x[:1], x[1:]])
    patch, cam, heat = discriminator_forward(d, ImageBatch(xx, torch.zeros(3, dtype=torch.long)))
    assert patch.shape == (3, 8, 8) and cam.shape == (3,) and heat.shape == (3, 8, 8)
    assert torch.isfinite(patch).all() and torch.isfinite(cam).all()
    assert torch.allclose(patch[0], patch[1]) and torch.allclose(cam[0], cam[1])


def test_same_seed_same_pair_and_disjoint_parameters():
    a, b = build_purifier(TINY, seed=3), build_purifier(TINY, seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = build_purifier(TINY, seed=4)
    assert any(not torch.equal(u, v) for u, v in zip(a.parameters(), c.parameters()))
    gids = {id(p) for p in a.generator_parameters()}
    dids = {id(p) for p in a.discriminator_parameters()}
    assert not gids & dids and gids | dids == {id(p) for p in a.parameters()}


def test_build_purifier_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_purifier(TINY, seed=1)
    assert torch.equal(torch.rand(3), expected)


def test_default_generator_under_two_million_parameters():
    pair = build_purifier(ArchConfig())
    assert count_parameters(pair.gen_A2C) < 2_000_000
    # the large (64-channel, 4 residual blocks) form is also reported
    big = Generator(64, 2, 4, residual=False)
    assert count_parameters(big) > count_parameters(pair.gen_A2C)


def test_degenerate_one_channel_runs_end_to_end():
    pair = build_purifier({"base_channels": 1, "n_downsampling": 1, "n_res_blocks": 1, "disc_channels": 1})
    x = torch.rand(2, 16, 16, 3, requires_grad=True)
    y = pair.purify(x)
    patch, cam, _ = pair.disc_C(y)
    (patch.mean() + cam.sum()).backward()
    assert y.shape == x.shape and torch.isfinite(x.grad).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.sampled_from([8, 16, 32]))
def test_generator_output_in_unit_box_property(n, size):
    g = Generator(2, 1, 1, residual=True)
    with torch.no_grad():
        for p in g.decoder[-1].parameters():
            p.normal_(0, 5)
        x = torch.rand(n, size, size, 3)
        out = g(x)[0]
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


def test_export_attention_writes_pngs(tmp_path):
    heat = torch.randn(3, 8, 8)
    heat[2] = 0
    paths = export_attention(heat, tmp_path / "att")
    assert [p.name for p in paths] == ["attention_0000.png", "attention_0001.png", "attention_0002.png"]
    assert all(p.stat().st_size > 0 for p in paths)
    assert not list((tmp_path / "att").glob("*.tmp.png"))
