"""Shared value types: image batches, perturbation budgets and threat models."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images in [0, 1] with integer labels.

    ``pixels`` has shape (B, H, W, C); ``labels`` has shape (B,).
    """

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be (B, H, W, C), got shape {tuple(self.pixels.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError(
                f"labels must have shape ({self.pixels.shape[0]},), got {tuple(self.labels.shape)}"
            )
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError(
                f"pixel values outside [0, 1]: min={self.pixels.min().item():.6g}, "
                f"max={self.pixels.max().item():.6g}"
            )

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.pixels.shape)

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        return ImageBatch(pixels.detach(), self.labels)

    def __getitem__(self, index) -> "ImageBatch":
        return ImageBatch(self.pixels[index], self.labels[index])

    def to(self, dtype: torch.dtype) -> "ImageBatch":
        return ImageBatch(self.pixels.to(dtype), self.labels)

    @staticmethod
    def concat(batches) -> "ImageBatch":
        batches = list(batches)
        return ImageBatch(
            torch.cat([b.pixels for b in batches]), torch.cat([b.labels for b in batches])
        )


class Norm(str, enum.Enum):
    LINF = "Linf"
    L2 = "L2"


@dataclass(frozen=True)
class PerturbationBudget:
    """Attack budget with ``epsilon`` and ``step_size`` given in 1/255 pixel units.

    The conversion to [0, 1] units happens here and nowhere else: use
    ``radius`` and ``step`` inside attacks.
    """

    epsilon: float
    norm: Norm = Norm.LINF
    step_size: float = 2.0
    steps: int = 1
    radius: float = field(init=False, repr=False)
    step: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        object.__setattr__(self, "norm", Norm(self.norm))
        object.__setattr__(self, "radius", self.epsilon / 255.0)
        object.__setattr__(self, "step", self.step_size / 255.0)


class Knowledge(str, enum.Enum):
    BLACK_BOX_TRANSFER = "BLACK_BOX_TRANSFER"
    BLACK_BOX_QUERY = "BLACK_BOX_QUERY"
    WHITE_BOX_TARGET = "WHITE_BOX_TARGET"
    WHITE_BOX_END2END = "WHITE_BOX_END2END"
    ADAPTIVE_BPDA = "ADAPTIVE_BPDA"


@dataclass(frozen=True)
class ThreatModel:
    """What an attack is allowed to see. ``query_limit`` is a per-image budget."""

    knowledge: Knowledge
    budget: PerturbationBudget
    query_limit: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "knowledge", Knowledge(self.knowledge))
        if self.knowledge is Knowledge.BLACK_BOX_QUERY:
            if self.query_limit is None or self.query_limit < 1:
                raise ValueError("BLACK_BOX_QUERY threat models need a positive query_limit")
        elif self.query_limit is not None:
            raise ValueError(f"query_limit is only meaningful for BLACK_BOX_QUERY, not {self.knowledge.value}")
