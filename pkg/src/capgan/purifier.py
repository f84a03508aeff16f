"""Attention-guided generators and discriminators of the purifier.

Both network kinds share the same attention mechanism: an encoder produces
``n`` feature maps, a linear domain classifier ``eta`` scores their global
average, and ``eta``'s weight vector rescales every feature map channel-wise.
The channel sum of the rescaled maps is the exported attention heatmap.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from capgan.core.seeding import fork_seed
from capgan.core.types import ImageBatch


LOGIT_EPS = 1e-3


def cam_attention(features: torch.Tensor, weight: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scale (B, n, h, w) features by per-channel weights (n,).

    Returns the attended features and their channel sum (B, h, w).
    """
    if features.shape[1] != weight.numel():
        raise ValueError(f"{features.shape[1]} feature channels but {weight.numel()} weights")
    attended = features * weight.view(1, -1, 1, 1)
    return attended, attended.sum(dim=1)


def _check_input(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected input of shape (B, H, W, 3), got {tuple(x.shape)}")


class _ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), nn.InstanceNorm2d(c, affine=True), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), nn.InstanceNorm2d(c, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder, CAM domain head and resize-convolution decoder over NHWC images.

    ``forward`` returns ``(translated, domain_logit, attention)``; the
    translated image goes through a sigmoid so it always lies in [0, 1].
    With ``residual=True`` the decoder predicts a correction that is added to
    ``logit(x)`` before the sigmoid, and its last layer starts at zero, so an
    untrained generator is (almost exactly) the identity map.
    """

    def __init__(self, base_channels: int = 16, n_downsampling: int = 2, n_res_blocks: int = 2,
                 residual: bool = True):
        super().__init__()
        self.residual = residual
        c = base_channels
        enc: list[nn.Module] = [nn.ReflectionPad2d(3), nn.Conv2d(3, c, 7), nn.InstanceNorm2d(c, affine=True), nn.ReLU()]
        for _ in range(n_downsampling):
            enc += [nn.Conv2d(c, 2 * c, 3, 2, 1), nn.InstanceNorm2d(2 * c, affine=True), nn.ReLU()]
            c *= 2
        enc += [_ResBlock(c) for _ in range(n_res_blocks)]
        self.encoder = nn.Sequential(*enc)
        self.feature_channels = c
        self.eta = nn.Linear(c, 1)
        dec: list[nn.Module] = []
        for _ in range(n_downsampling):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.ReflectionPad2d(1),
                    nn.Conv2d(c, c // 2 or 1, 3), nn.InstanceNorm2d(c // 2 or 1, affine=True), nn.ReLU()]
            c = c // 2 or 1
        dec += [nn.ReflectionPad2d(1), nn.Conv2d(c, 3, 3)]
        self.decoder = nn.Sequential(*dec)
        if residual:
            nn.init.zeros_(dec[-1].weight)
            nn.init.zeros_(dec[-1].bias)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x)
        return self.encoder(x.permute(0, 3, 1, 2))

    def forward(self, x: torch.Tensor):
        feats = self.encode(x)
        logit = self.eta(feats.mean(dim=(2, 3))).squeeze(1)
        attended, heat = cam_attention(feats, self.eta.weight[0])
        raw = self.decoder(attended)
        if self.residual:
            raw = raw + torch.logit(x, eps=LOGIT_EPS).permute(0, 3, 1, 2)
        out = torch.sigmoid(raw).permute(0, 2, 3, 1)
        if out.shape != x.shape:
            raise ValueError(f"generator produced {tuple(out.shape)} for input {tuple(x.shape)}")
        return out, logit, heat


class Discriminator(nn.Module):
    """Two stride-2 convolutions, a CAM domain head and a convolutional patch head.

    The patch map is 1/4 of the input resolution. No normalisation layers.
    """

    def __init__(self, channels: int = 16):
        super().__init__()
        c = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 3, 1, 1), nn.LeakyReLU(0.2),
        )
        self.eta = nn.Linear(4 * c, 1)
        self.head = nn.Conv2d(4 * c, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor):
        _check_input(x)
        feats = self.encoder(x.permute(0, 3, 1, 2))
        cam_logit = self.eta(feats.mean(dim=(2, 3))).squeeze(1)
        attended, heat = cam_attention(feats, self.eta.weight[0])
        return self.head(attended).squeeze(1), cam_logit, heat


class PurifierPair(nn.Module):
    """``gen_A2C`` purifies, ``gen_C2A`` closes the cycle; ``disc_C``/``disc_A`` judge each domain."""

    def __init__(self, base_channels: int = 16, n_downsampling: int = 2, n_res_blocks: int = 2,
                 disc_channels: int = 16, residual: bool = True):
        super().__init__()
        self.arch = dict(base_channels=base_channels, n_downsampling=n_downsampling,
                         n_res_blocks=n_res_blocks, disc_channels=disc_channels, residual=residual)
        self.gen_A2C = Generator(base_channels, n_downsampling, n_res_blocks, residual)
        self.gen_C2A = Generator(base_channels, n_downsampling, n_res_blocks, residual)
        self.disc_C = Discriminator(disc_channels)
        self.disc_A = Discriminator(disc_channels)

    def generator_parameters(self):
        return list(self.gen_A2C.parameters()) + list(self.gen_C2A.parameters())

    def discriminator_parameters(self):
        return list(self.disc_C.parameters()) + list(self.disc_A.parameters())

    def purify(self, x: torch.Tensor) -> torch.Tensor:
        return self.gen_A2C(x)[0]


def build_purifier(arch=None, seed: int = 0) -> PurifierPair:
    """Build a deterministically initialised pair. ``arch`` is an ``ArchConfig`` or a dict."""
    if arch is None:
        kwargs = {}
    elif isinstance(arch, dict):
        kwargs = dict(arch)
    else:
        kwargs = arch.model_dump()
    with torch.random.fork_rng():
        torch.manual_seed(fork_seed("init", 1, seed=seed))
        return PurifierPair(**kwargs)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass(frozen=True)
class GeneratorOutput:
    translated: ImageBatch
    domain_logit: torch.Tensor
    attention: torch.Tensor


def generator_forward(g: Generator, x: ImageBatch) -> GeneratorOutput:
    out, logit, heat = g(x.pixels)
    return GeneratorOutput(ImageBatch(out, x.labels), logit, heat)


def discriminator_forward(d: Discriminator, x: ImageBatch):
    """Return ``(patch_scores (B, h, w), cam_logit (B,), attention (B, h, w))``."""
    return d(x.pixels)


def export_attention(attention: torch.Tensor, out_dir: str | os.PathLike, prefix: str = "attention") -> list[Path]:
    """Write each (h, w) map as a grayscale PNG, min-max scaled per map."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    maps = attention.detach().cpu().double().numpy()
    for i, m in enumerate(maps):
        lo, hi = m.min(), m.max()
        scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        path = out_dir / f"{prefix}_{i:04d}.png"
        tmp = path.with_suffix(".tmp.png")
        plt.imsave(tmp, scaled, cmap="gray", vmin=0.0, vmax=1.0)
        os.replace(tmp, path)
        paths.append(path)
    return paths
