"""Experiment configuration.

Configs are JSON documents. Every section forbids unknown keys, so a typo
fails loudly instead of silently falling back to a default.

Schema (defaults are the desk-scale settings)::

    seed                      int
    dataset.path              str, dataset root; "" means $CAPGAN_DATA_DIR
    dataset.classes           list[int] | null (all classes)
    dataset.train_cap         int | null, per-class cap on training samples
    dataset.test_cap          int | null, per-class cap on test samples
    dataset.relabel           bool, map kept classes to 0..K-1
    classifier.width          int, channels of the first residual stage
    classifier.epochs / lr / batch_size / weight_decay / augment
    classifier.surrogate_seed_offset  int, seed offset of the transfer surrogate
    capgan.alpha              float in [0, 1], pixel/feature balance
    capgan.temperature        float > 0, distillation temperature
    capgan.lr / betas / batch_size / epochs
    capgan.lambda_gan / lambda_identity / lambda_cycle   weights inside the pixel term
    capgan.use_cam / use_sem / use_cycle                 loss-term switches
    capgan.domain_epsilon     float, FGSM budget (1/255 units) for the adversarial domain
    capgan.checkpoint_every   int, steps between checkpoints (0 = never)
    capgan.arch.*             generator / discriminator sizes; residual=true makes
                              generators predict a correction to logit(x)
    attacks                   list of {name, knowledge, epsilon, query_limit}
    evaluation.eps_list       list[float], ascending
    evaluation.batch_size     int
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(_Section):
    path: str = ""
    classes: list[int] | None = [1, 6, 8]
    train_cap: int | None = Field(1500, ge=0)
    test_cap: int | None = Field(200, ge=0)
    relabel: bool = True

    def resolved_path(self) -> Path:
        path = self.path or os.environ.get("CAPGAN_DATA_DIR", "")
        if not path:
            raise ConfigError("dataset.path is empty and CAPGAN_DATA_DIR is not set")
        return Path(path)


class ClassifierConfig(_Section):
    width: int = Field(16, ge=1)
    epochs: int = Field(8, ge=0)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(5e-4, ge=0)
    augment: bool = True
    surrogate_seed_offset: int = 1000


class ArchConfig(_Section):
    base_channels: int = Field(16, ge=1)
    n_downsampling: int = Field(2, ge=0)
    n_res_blocks: int = Field(2, ge=0)
    disc_channels: int = Field(16, ge=1)
    residual: bool = True


class CapganConfig(_Section):
    alpha: float = Field(0.7, ge=0.0, le=1.0)
    temperature: float = Field(10.0, gt=0.0)
    lr: float = Field(1e-4, gt=0)
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(200, ge=0)
    lambda_gan: float = Field(1.0, ge=0)
    lambda_identity: float = Field(5.0, ge=0)
    lambda_cycle: float = Field(10.0, ge=0)
    use_cam: bool = True
    use_sem: bool = True
    use_cycle: bool = True
    domain_epsilon: float = Field(8.0, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    arch: ArchConfig = ArchConfig()


class AttackEntry(_Section):
    name: str
    knowledge: Literal[
        "BLACK_BOX_TRANSFER", "BLACK_BOX_QUERY", "WHITE_BOX_TARGET", "WHITE_BOX_END2END", "ADAPTIVE_BPDA"
    ]
    epsilon: float = Field(8.0, ge=0)
    query_limit: int | None = None


class EvaluationConfig(_Section):
    eps_list: list[float] = [4.0, 8.0, 12.0, 16.0, 32.0]
    batch_size: int = Field(200, ge=1)

    @field_validator("eps_list")
    @classmethod
    def _ascending(cls, v):
        if not v:
            raise ValueError("eps_list must be non-empty")
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("eps_list must be ascending")
        if v[0] < 0:
            raise ValueError("eps_list values must be >= 0")
        return v


class ExperimentConfig(_Section):
    seed: int = 0
    dataset: DatasetConfig = DatasetConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    capgan: CapganConfig = CapganConfig()
    attacks: list[AttackEntry] = [
        AttackEntry(name="fgsm", knowledge="BLACK_BOX_TRANSFER"),
        AttackEntry(name="mifgsm20", knowledge="BLACK_BOX_TRANSFER"),
        AttackEntry(name="pgd7", knowledge="BLACK_BOX_TRANSFER"),
        AttackEntry(name="pgd40", knowledge="BLACK_BOX_TRANSFER"),
        AttackEntry(name="bpda_i40", knowledge="ADAPTIVE_BPDA"),
    ]
    evaluation: EvaluationConfig = EvaluationConfig()


def render(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def parse(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from None


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from None


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"))


def save_config(config: ExperimentConfig, path: str | os.PathLike) -> None:
    from capgan.core.io import atomic_write_text

    atomic_write_text(path, render(config))


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides. Values are parsed as JSON when possible."""
    data = config.model_dump(mode="json")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"override {key!r} does not name a schema key")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"override {key!r} does not name a schema key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value
    return from_dict(data)


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config: " + "; ".join(lines)
