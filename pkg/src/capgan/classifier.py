"""Residual CIFAR classifier: target, transfer surrogate and adversarially trained baseline."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from capgan.core.data import ImageDataset
from capgan.core.io import atomic_open
from capgan.core.seeding import fork_seed, numpy_rng, torch_generator
from capgan.core.types import ImageBatch, Norm, PerturbationBudget

log = logging.getLogger(__name__)

ROLES = ("target", "surrogate", "adversarially_trained")
SOURCES = ("real_C", "real_A", "fake_C", "fake_A")


class TrainingDivergedError(RuntimeError):
    pass


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualClassifier(nn.Module):
    """Three residual stages (w, 2w, 4w channels) over NHWC input in [0, 1].

    Per-channel mean/std normalisation happens inside ``forward`` so that
    every attack works in raw pixel space.
    """

    def __init__(self, num_classes: int, width: int = 16, role: str = "target",
                 mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        self.role = role
        self.num_classes = num_classes
        self.width = width
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32))
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.stages = nn.Sequential(
            _Block(width, width, 1),
            _Block(width, 2 * width, 2),
            _Block(2 * width, 4 * width, 2),
        )
        self.fc = nn.Linear(4 * width, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected input of shape (B, H, W, 3), got {tuple(x.shape)}")
        x = (x - self.mean) / self.std
        x = x.permute(0, 3, 1, 2)
        x = self.stages(self.stem(x))
        return self.fc(x.mean(dim=(2, 3)))

    def freeze(self) -> "ResidualClassifier":
        self.eval()
        self.requires_grad_(False)
        for p in self.parameters():
            p.grad = None
        return self


@dataclass(frozen=True)
class Schedule:
    epochs: int = 8
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 5e-4
    augment: bool = True
    width: int = 16

    @classmethod
    def from_config(cls, cfg) -> "Schedule":
        return cls(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                   weight_decay=cfg.weight_decay, augment=cfg.augment, width=cfg.width)


@dataclass(frozen=True)
class LogitBatch:
    logits: torch.Tensor
    source: str = "real_C"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.logits.dim() != 2:
            raise ValueError(f"logits must be (B, K), got {tuple(self.logits.shape)}")
        if not torch.isfinite(self.logits).all():
            raise ValueError("logits contain NaN or Inf")


def predict_logits(model: nn.Module, x: ImageBatch, source: str = "real_C") -> LogitBatch:
    expected = (3,)
    if x.pixels.shape[-1:] != expected:
        raise ValueError(f"input shape mismatch: expected (B, H, W, 3), got {tuple(x.pixels.shape)}")
    with torch.no_grad():
        return LogitBatch(model(x.pixels), source)


def soft_targets(z: LogitBatch | torch.Tensor, T: float) -> torch.Tensor:
    """Temperature-scaled softmax, rows of ``exp(z_i / T) / sum_j exp(z_j / T)``."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    logits = z.logits if isinstance(z, LogitBatch) else z
    return torch.softmax(logits / T, dim=-1)


def accuracy(model: nn.Module, data: ImageDataset | ImageBatch, batch_size: int = 500) -> float:
    """Top-1 accuracy in percent."""
    batches = [data] if isinstance(data, ImageBatch) else data.batches(batch_size)
    correct = total = 0
    with torch.no_grad():
        for b in batches:
            for i in range(0, len(b), batch_size):
                chunk = b[i:i + batch_size]
                correct += (model(chunk.pixels).argmax(1) == chunk.labels).sum().item()
                total += len(chunk)
    return 100.0 * correct / max(total, 1)


def _channel_stats(data: ImageDataset):
    if len(data) == 0:
        return (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)
    x = data.images.reshape(-1, data.images.shape[-1]).astype(np.float64) / 255.0
    return tuple(x.mean(0).tolist()), tuple(np.maximum(x.std(0), 1e-3).tolist())


def _augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    # random horizontal flip + 4-pixel reflect-padded crop, per batch offset
    flip = torch.rand(x.shape[0], generator=g) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(2), x)
    padded = F.pad(x.permute(0, 3, 1, 2), (2, 2, 2, 2), mode="reflect").permute(0, 2, 3, 1)
    dy, dx = torch.randint(0, 5, (2,), generator=g).tolist()
    return padded[:, dy:dy + x.shape[1], dx:dx + x.shape[2]]


def train_classifier(
    train: ImageDataset,
    schedule: Schedule,
    *,
    role: str = "target",
    seed: int = 0,
    num_classes: int | None = None,
    adversary=None,
) -> ResidualClassifier:
    """Train a classifier with Adam and a one-cycle learning-rate schedule.

    ``adversary(model, batch) -> ImageBatch`` replaces each minibatch before the
    gradient step; it is how ``adversarial_train`` plugs in PGD.
    """
    num_classes = num_classes or train.num_classes
    mean, std = _channel_stats(train)
    with torch.random.fork_rng():
        torch.manual_seed(fork_seed("init", seed=seed))
        model = ResidualClassifier(num_classes, schedule.width, role, mean, std)
    steps_per_epoch = math.ceil(len(train) / schedule.batch_size)
    total = schedule.epochs * steps_per_epoch
    if total == 0:
        return model.freeze()

    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=schedule.lr, total_steps=total)
    aug_gen = torch_generator("data", 1, seed=seed)
    step = 0
    for epoch in range(schedule.epochs):
        rng = numpy_rng("data", 0, epoch, seed=seed)
        for batch in train.shuffled(schedule.batch_size, rng):
            model.train()
            x = batch.pixels
            if schedule.augment:
                x = _augment(x, aug_gen)
            if adversary is not None:
                model.eval()
                x = adversary(model, ImageBatch(x, batch.labels)).pixels
                model.train()
            loss = F.cross_entropy(model(x), batch.labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"classifier loss became {loss.item()} at epoch {epoch}, step {step}, "
                    f"lr {sched.get_last_lr()[0]:.3g}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
        log.info("%s classifier epoch %d/%d loss %.4f", role, epoch + 1, schedule.epochs, loss.item())
    return model.freeze()


def adversarial_train(
    train: ImageDataset,
    budget: PerturbationBudget,
    schedule: Schedule,
    *,
    seed: int = 0,
) -> ResidualClassifier:
    """PGD adversarial training: every minibatch is replaced by random-start PGD examples."""
    from capgan.attacks import DifferentiableTarget, pgd

    if budget.norm is not Norm.LINF:
        raise ValueError("adversarial training supports Linf budgets only")
    gen = torch_generator("attack", 7, seed=seed)

    def adversary(model, batch):
        return pgd(DifferentiableTarget(model), batch, budget, random_start=True, generator=gen)

    return train_classifier(train, schedule, role="adversarially_trained", seed=seed, adversary=adversary)


def export_embeddings(model: nn.Module, clean: ImageBatch, adv: ImageBatch, out: str | os.PathLike) -> None:
    """Dump flattened pixels and logits of clean (domain C) and adversarial (domain A) images.

    One row per (index, space, domain); pixel rows have H*W*C components,
    logit rows K components, the rest of the row is left empty.
    """
    if clean.pixels.shape != adv.pixels.shape or not torch.equal(clean.labels, adv.labels):
        raise ValueError("clean and adversarial batches must be index-aligned")
    n = len(clean)
    with torch.no_grad():
        z_clean, z_adv = model(clean.pixels), model(adv.pixels)
    width = max(clean.pixels[0].numel(), z_clean.shape[1])
    with atomic_open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "space", "domain"] + [f"v{i}" for i in range(width)])
        for i in range(n):
            label = int(clean.labels[i])
            for space, c_vec, a_vec in (
                ("pixel", clean.pixels[i].reshape(-1), adv.pixels[i].reshape(-1)),
                ("logit", z_clean[i], z_adv[i]),
            ):
                for domain, vec in (("C", c_vec), ("A", a_vec)):
                    w.writerow([i, label, space, domain] + [repr(float(v)) for v in vec.tolist()])


def save_classifier(model: ResidualClassifier, path: str | os.PathLike) -> None:
    from capgan.core.checkpoint import save_checkpoint

    meta = {"num_classes": model.num_classes, "width": model.width, "role": model.role}
    save_checkpoint({"kind": "classifier", "meta": meta, "state": dict(model.state_dict())}, path)


def load_classifier(path: str | os.PathLike) -> ResidualClassifier:
    from capgan.core.checkpoint import CheckpointError, load_checkpoint

    blob = load_checkpoint(path)
    if not isinstance(blob, dict) or blob.get("kind") != "classifier":
        raise CheckpointError(f"{path} does not hold a classifier")
    model = ResidualClassifier(**blob["meta"])
    model.load_state_dict(blob["state"])
    return model.freeze()
