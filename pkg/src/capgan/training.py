"""Adversarial-domain construction and the cycle-consistent purifier training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from capgan.attacks import DifferentiableTarget, fgsm
from capgan.classifier import TrainingDivergedError
from capgan.core.checkpoint import load_checkpoint, save_checkpoint
from capgan.core.config import ExperimentConfig
from capgan.core.data import ImageDataset
from capgan.core.io import atomic_open
from capgan.core.seeding import numpy_rng, root_seed
from capgan.core.types import ImageBatch, PerturbationBudget
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
from capgan.purifier import PurifierPair, build_purifier

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr") + tuple(LossReport.__dataclass_fields__)


@dataclass(frozen=True)
class PairedDomains:
    """Index-aligned clean (C) and adversarial (A) images."""

    clean: ImageBatch
    adversarial: ImageBatch
    attack: str = "fgsm"
    epsilon: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.clean.shape != self.adversarial.shape:
            raise ValueError("clean and adversarial domains must have the same shape")
        if not torch.equal(self.clean.labels, self.adversarial.labels):
            raise ValueError("paired domains must share labels")
        if len(self.clean) and (self.adversarial.pixels - self.clean.pixels).abs().max() > self.epsilon / 255 + 1e-6:
            raise ValueError(f"adversarial domain leaves the epsilon={self.epsilon} ball")

    def __len__(self) -> int:
        return len(self.clean)


def build_adversarial_domain(
    f: torch.nn.Module,
    clean: ImageDataset | ImageBatch,
    budget: PerturbationBudget,
    batch_size: int = 500,
    seed: int | None = None,
) -> PairedDomains:
    """One FGSM pass of ``f`` over ``clean``; the result is stored, never refreshed."""
    data = clean.as_batch() if isinstance(clean, ImageDataset) else clean
    target = DifferentiableTarget(f)
    chunks = [fgsm(target, data[i:i + batch_size], budget) for i in range(0, len(data), batch_size)]
    adv = ImageBatch.concat(chunks) if chunks else data.with_pixels(data.pixels.clone())
    return PairedDomains(data, adv, "fgsm", budget.epsilon, root_seed() if seed is None else seed)


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * (1 + math.cos(math.pi * step / total_steps)) / 2


@dataclass
class TrainState:
    pair: PurifierPair
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    step: int = 0
    total_steps: int = 0
    base_lr: float = 1e-4

    def __post_init__(self):
        g = {id(p) for grp in self.opt_G.param_groups for p in grp["params"]}
        d = {id(p) for grp in self.opt_D.param_groups for p in grp["params"]}
        every = {id(p) for p in self.pair.parameters()}
        if g & d or (g | d) != every:
            raise AssertionError("optimizer parameter sets must be disjoint and cover the purifier")

    def state_dict(self) -> dict:
        return {
            "pair": dict(self.pair.state_dict()),
            "arch": dict(self.pair.arch),
            "opt_G": self.opt_G.state_dict(),
            "opt_D": self.opt_D.state_dict(),
            "step": self.step,
            "total_steps": self.total_steps,
            "base_lr": self.base_lr,
        }

    def load_state_dict(self, state: dict) -> None:
        self.pair.load_state_dict(state["pair"])
        self.opt_G.load_state_dict(state["opt_G"])
        self.opt_D.load_state_dict(state["opt_D"])
        self.step = int(state["step"])
        self.total_steps = int(state["total_steps"])
        self.base_lr = float(state["base_lr"])


@dataclass
class TrainResult:
    pair: PurifierPair
    log: list[dict] = field(default_factory=list)


def new_state(config: ExperimentConfig, total_steps: int, seed: int) -> TrainState:
    cfg = config.capgan
    pair = build_purifier(cfg.arch, seed)
    betas = tuple(cfg.betas)
    opt_G = torch.optim.Adam(pair.generator_parameters(), lr=cfg.lr, betas=betas)
    opt_D = torch.optim.Adam(pair.discriminator_parameters(), lr=cfg.lr, betas=betas)
    return TrainState(pair, opt_G, opt_D, 0, total_steps, cfg.lr)


def save_purifier(pair: PurifierPair, path: str | os.PathLike) -> None:
    save_checkpoint({"kind": "purifier", "arch": dict(pair.arch), "state": dict(pair.state_dict())}, path)


def load_purifier(path: str | os.PathLike) -> PurifierPair:
    blob = load_checkpoint(path)
    if "pair" in blob:  # full training checkpoint
        arch, state = blob["arch"], blob["pair"]
    else:
        arch, state = blob["arch"], blob["state"]
    pair = PurifierPair(**arch)
    pair.load_state_dict(state)
    return pair.eval()


def _check(terms: dict[str, torch.Tensor], step: int) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise TrainingDivergedError(f"loss term {name!r} became {value.item()} at step {step}")


def train_step(state: TrainState, f: torch.nn.Module, x: torch.Tensor, xa: torch.Tensor,
               config: ExperimentConfig) -> LossReport:
    """One discriminator update followed by one generator update on a paired batch."""
    cfg = config.capgan
    pair, alpha, T = state.pair, cfg.alpha, cfg.temperature
    lr = lr_schedule(state.step, state.total_steps, state.base_lr)
    for opt in (state.opt_G, state.opt_D):
        for grp in opt.param_groups:
            grp["lr"] = lr
    pair.train()
    G_A2C, G_C2A, D_C, D_A = pair.gen_A2C, pair.gen_C2A, pair.disc_C, pair.disc_A

    c2c, etaA_x, _ = G_A2C(x)
    a2c, etaA_xa, _ = G_A2C(xa)
    a2a, etaC_xa, _ = G_C2A(xa)
    c2a, etaC_x, _ = G_C2A(x)

    # discriminators on detached fakes
    for p in pair.discriminator_parameters():
        p.requires_grad_(True)
    real_C, real_C_cam, _ = D_C(x)
    fake_C, fake_C_cam, _ = D_C(a2c.detach())
    real_A, real_A_cam, _ = D_A(xa)
    fake_A, fake_A_cam, _ = D_A(c2a.detach())
    d_terms = {"disc_gan": lsgan_loss(real_C, fake_C, "discriminator") + lsgan_loss(real_A, fake_A, "discriminator")}
    if cfg.use_cam:
        d_terms["disc_cam"] = cam_loss_discriminator(real_C_cam, fake_C_cam) + cam_loss_discriminator(real_A_cam, fake_A_cam)
    _check(d_terms, state.step)
    _, d_total = total_objective(d_terms, alpha)
    state.opt_D.zero_grad(set_to_none=True)
    d_total.backward()
    state.opt_D.step()

    # generators against the updated discriminators
    for p in pair.discriminator_parameters():
        p.requires_grad_(False)
    g_fake_C, g_fake_C_cam, _ = D_C(a2c)
    g_fake_A, g_fake_A_cam, _ = D_A(c2a)
    g_terms = {
        "gan": cfg.lambda_gan * (lsgan_loss(None, g_fake_C, "generator") + lsgan_loss(None, g_fake_A, "generator")),
        "identity": cfg.lambda_identity * (identity_loss(c2c, x) + identity_loss(a2a, xa)),
    }
    c_set, a_set = [a2c, c2c], [c2a, a2a]
    if cfg.use_cycle:
        c2a2c = G_A2C(c2a)[0]
        a2c2a = G_C2A(a2c)[0]
        g_terms["cycle"] = cfg.lambda_cycle * (cycle_loss(a2c2a, xa) + cycle_loss(c2a2c, x))
        c_set.append(c2a2c)
        a_set.append(a2c2a)
    if cfg.use_cam:
        g_terms["cam_G"] = (cam_loss_generator(torch.sigmoid(etaA_xa), torch.sigmoid(etaA_x))
                            + cam_loss_generator(torch.sigmoid(etaC_x), torch.sigmoid(etaC_xa)))
        g_terms["cam_D"] = lsgan_loss(None, g_fake_C_cam, "generator") + lsgan_loss(None, g_fake_A_cam, "generator")
    if cfg.use_sem:
        with torch.no_grad():
            z_x, z_xa = f(x), f(xa)
        fakes = torch.cat(c_set + a_set)
        z_fake = f(fakes).split(x.shape[0])
        targets = [z_x] * len(c_set) + [z_xa] * len(a_set)
        g_terms["semantic"] = sum(semantic_loss(zr, zf, T) for zr, zf in zip(targets, z_fake))
    _check(g_terms, state.step)
    g_total, _ = total_objective(g_terms, alpha)
    state.opt_G.zero_grad(set_to_none=True)
    g_total.backward()
    for p in f.parameters():
        if p.requires_grad or p.grad is not None:
            raise AssertionError("the classifier received gradients during purifier training")
    state.opt_G.step()
    for p in pair.discriminator_parameters():
        p.requires_grad_(True)

    state.step += 1
    return LossReport.from_terms({**{k: v.detach() for k, v in g_terms.items()},
                                  **{k: v.detach() for k, v in d_terms.items()}}, alpha)


def train_capgan(
    domains: PairedDomains,
    f: torch.nn.Module,
    config: ExperimentConfig,
    *,
    seed: int | None = None,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    max_steps: int | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Train a purifier on paired domains against the frozen classifier ``f``.

    Batches are drawn by a seeded per-epoch permutation shared by both
    domains. With ``out_dir`` set, ``train_log.csv`` and (every
    ``checkpoint_every`` steps) ``checkpoint_<step>.ckpt`` are written there.
    ``resume`` continues from such a checkpoint and reproduces the
    uninterrupted run exactly. ``max_steps`` stops early without changing
    the learning-rate schedule.
    """
    cfg = config.capgan
    seed = config.seed if seed is None else seed
    f.eval()
    if any(p.requires_grad for p in f.parameters()):
        raise ValueError("the classifier must be frozen before purifier training")
    n = len(domains)
    per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total = per_epoch * cfg.epochs
    state = new_state(config, total, seed)
    if resume is not None:
        state.load_state_dict(load_checkpoint(resume))
    out = Path(out_dir) if out_dir is not None else None
    rows: list[dict] = []
    stop = total if max_steps is None else min(total, max_steps)

    while state.step < stop:
        epoch, offset = divmod(state.step, per_epoch)
        order = numpy_rng("data", 2, epoch, seed=seed).permutation(n)
        for b in range(offset, per_epoch):
            if state.step >= stop:
                break
            idx = torch.from_numpy(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            step = state.step
            report = train_step(state, f, domains.clean.pixels[idx], domains.adversarial.pixels[idx], config)
            row = {"step": step, "epoch": epoch, "lr": lr_schedule(step, total, state.base_lr), **report.as_dict()}
            rows.append(row)
            if on_step is not None:
                on_step(step, report)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state.state_dict(), out / f"checkpoint_{state.step:07d}.ckpt")
        log.info("purifier epoch %d/%d cap_total %.4f", epoch + 1, cfg.epochs, rows[-1]["cap_total"] if rows else float("nan"))

    state.pair.eval()
    if out is not None:
        write_train_log(rows, out / "train_log.csv")
        save_purifier(state.pair, out / "purifier.ckpt")
    return TrainResult(state.pair, rows)


def write_train_log(rows: list[dict], path: str | os.PathLike) -> None:
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def purify(pair: PurifierPair, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Run ``gen_A2C`` in eval mode without gradients, in chunks."""
    pair.eval()
    with torch.no_grad():
        return torch.cat([pair.purify(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]) if len(x) else x.clone()


__all__ = [
    "PairedDomains",
    "TrainResult",
    "TrainState",
    "build_adversarial_domain",
    "load_purifier",
    "lr_schedule",
    "new_state",
    "purify",
    "save_purifier",
    "train_capgan",
    "train_step",
]
