"""Robustness evaluation: protocols, epsilon sweeps, ablation grids and reports.

Protocols map onto what the attack is handed:

==================== ==================================================
BLACK_BOX_TRANSFER   gradients of the surrogate classifier
WHITE_BOX_TARGET     gradients of the bare classifier
WHITE_BOX_END2END    gradients through purifier and classifier
ADAPTIVE_BPDA        purifier forward, classifier gradient (bpda only)
BLACK_BOX_QUERY      logits of the whole pipeline, query-limited
==================== ==================================================

The attack success rate is always measured against the undefended
classifier, on the same samples as the accuracy.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn

from capgan.attacks import ATTACKS, DifferentiableTarget, QueryTarget, get_attack, run_attack
from capgan.attacks.registry import BPDA, GRADIENT, QUERY
from capgan.core.config import ExperimentConfig, apply_overrides
from capgan.core.data import ImageDataset
from capgan.core.io import atomic_open, atomic_write_text
from capgan.core.seeding import root_seed, torch_generator
from capgan.core.types import ImageBatch, Knowledge, PerturbationBudget, ThreatModel
from capgan.purifier import PurifierPair, export_attention

log = logging.getLogger(__name__)

NO_ATTACK = "none"

_ALLOWED = {
    GRADIENT: {Knowledge.BLACK_BOX_TRANSFER, Knowledge.WHITE_BOX_TARGET, Knowledge.WHITE_BOX_END2END},
    BPDA: {Knowledge.ADAPTIVE_BPDA},
    QUERY: {Knowledge.BLACK_BOX_QUERY},
}


class ConfigurationError(ValueError):
    pass


class ReportError(OSError):
    pass


@dataclass
class DefensePipeline:
    """The classifier, optionally behind the purifier ``T_A2C``.

    ``surrogate`` is the transfer model used by BLACK_BOX_TRANSFER attacks.
    """

    classifier: nn.Module
    purifier: PurifierPair | None = None
    defended: bool = False
    name: str = ""
    surrogate: nn.Module | None = None

    def __post_init__(self):
        if self.defended and self.purifier is None:
            raise ConfigurationError("a defended pipeline needs a purifier")
        if not self.name:
            self.name = "capgan" if self.defended else "undefended"
        self.classifier.eval()
        if self.purifier is not None:
            self.purifier.eval()

    @classmethod
    def undefended(cls, classifier, surrogate=None) -> "DefensePipeline":
        return cls(classifier, None, False, "undefended", surrogate)

    @classmethod
    def with_purifier(cls, classifier, purifier, name="capgan", surrogate=None) -> "DefensePipeline":
        return cls(classifier, purifier, True, name, surrogate)

    def purify(self, x: torch.Tensor) -> torch.Tensor:
        return self.purifier.purify(x) if self.defended else x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.purify(x))

    __call__ = forward


@dataclass(frozen=True)
class EvalRecord:
    defense: str
    attack: str
    epsilon: float
    protocol: str
    accuracy: float
    success_rate: float
    n_samples: int
    seed: int
    clean_accuracy: float
    random_start: bool = True
    truncated: bool = False
    queries: int = 0
    wall_time: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("accuracy", "success_rate", "clean_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be in [0, 100], got {v}")


CSV_FIELDS = tuple(f.name for f in fields(EvalRecord) if f.name != "wall_time")


def _as_batch(data: ImageBatch | ImageDataset) -> ImageBatch:
    return data.as_batch() if isinstance(data, ImageDataset) else data


def check_attack_protocol(attack: str, knowledge: Knowledge) -> None:
    """Raise ``ConfigurationError`` unless ``attack`` may run under ``knowledge``."""
    if attack == NO_ATTACK:
        return
    if attack not in ATTACKS:
        raise ConfigurationError(f"unknown attack {attack!r}; known: none, {', '.join(ATTACKS)}")
    iface = get_attack(attack).interface
    if knowledge not in _ALLOWED[iface]:
        allowed = ", ".join(sorted(k.value for k in _ALLOWED[iface]))
        raise ConfigurationError(
            f"attack {attack!r} needs {iface} access, which {knowledge.value} does not grant (use one of: {allowed})"
        )


def _check_protocol(pipeline: DefensePipeline, attack: str, tm: ThreatModel) -> None:
    check_attack_protocol(attack, tm.knowledge)
    if attack == NO_ATTACK:
        return
    if tm.knowledge is Knowledge.BLACK_BOX_TRANSFER and pipeline.surrogate is None:
        raise ConfigurationError("BLACK_BOX_TRANSFER needs a surrogate classifier in the pipeline")


def _correct(model, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([model(x[i:i + batch_size]).argmax(1) == y[i:i + batch_size]
                          for i in range(0, len(x), batch_size)])


def evaluate(
    pipeline: DefensePipeline,
    data: ImageBatch | ImageDataset,
    attack: str,
    tm: ThreatModel,
    *,
    seed: int | None = None,
    batch_size: int = 200,
    random_start: bool = True,
    dump_attention: str | os.PathLike | None = None,
) -> EvalRecord:
    """Attack ``data`` under ``tm`` and score the pipeline on the result.

    Protocol and interface mismatches raise ``ConfigurationError`` before
    any model is queried.
    """
    _check_protocol(pipeline, attack, tm)
    seed = root_seed() if seed is None else seed
    data = _as_batch(data)
    n = len(data)
    start = time.perf_counter()
    eps = tm.budget.epsilon
    clean_ok = _correct(pipeline, data.pixels, data.labels, batch_size)
    truncated, queries = False, 0

    if attack == NO_ATTACK:
        adv = data.pixels
        robust_ok = clean_ok
    else:
        spec = get_attack(attack)
        gen = torch_generator("attack", zlib.crc32(attack.encode()), int(round(eps * 1000)), seed=seed)
        chunks = []
        for i in range(0, n, batch_size):
            x = data[i:i + batch_size]
            purify = None
            if spec.interface == QUERY:
                target = QueryTarget(pipeline.forward, limit=tm.query_limit * len(x))
            elif spec.interface == BPDA:
                target, purify = DifferentiableTarget(pipeline.classifier), pipeline.purify
            elif tm.knowledge is Knowledge.BLACK_BOX_TRANSFER:
                target = DifferentiableTarget(pipeline.surrogate)
            elif tm.knowledge is Knowledge.WHITE_BOX_TARGET:
                target = DifferentiableTarget(pipeline.classifier)
            else:
                target = DifferentiableTarget(pipeline.forward)
            out = run_attack(attack, target, x, eps, generator=gen, purify=purify,
                             query_limit=tm.query_limit, random_start=random_start)
            if spec.interface == QUERY and target.queries > target.limit:
                raise AssertionError(f"query audit failed: {target.queries} > {target.limit}")
            truncated |= out.truncated
            queries += out.queries
            chunks.append(out.adversarial.pixels)
        adv = torch.cat(chunks) if chunks else data.pixels
        robust_ok = _correct(pipeline, adv, data.labels, batch_size)

    fooled = ~_correct(pipeline.classifier, adv, data.labels, batch_size)
    if dump_attention is not None and pipeline.defended:
        with torch.no_grad():
            heat = pipeline.purifier.gen_A2C(adv[:16])[2]
        export_attention(heat, dump_attention, prefix=f"{attack}_eps{eps:g}")

    pct = lambda m: 100.0 * int(m.sum()) / n if n else 0.0  # noqa: E731
    return EvalRecord(
        defense=pipeline.name,
        attack=attack,
        epsilon=float(eps),
        protocol=tm.knowledge.value,
        accuracy=pct(robust_ok),
        success_rate=pct(fooled),
        n_samples=n,
        seed=seed,
        clean_accuracy=pct(clean_ok),
        random_start=random_start,
        truncated=truncated,
        queries=queries,
        wall_time=time.perf_counter() - start,
    )


def epsilon_sweep(
    pipeline: DefensePipeline,
    data: ImageBatch | ImageDataset,
    attack: str,
    eps_list: Sequence[float],
    knowledge: Knowledge | str = Knowledge.BLACK_BOX_TRANSFER,
    *,
    query_limit: int | None = None,
    **kwargs,
) -> list[EvalRecord]:
    """One ``evaluate`` per epsilon; every threat model is validated first."""
    eps_list = list(eps_list)
    if not eps_list:
        raise ConfigurationError("eps_list must be non-empty")
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigurationError(f"eps_list must be ascending, got {eps_list}")
    try:
        tms = [ThreatModel(Knowledge(knowledge), PerturbationBudget(e), query_limit) for e in eps_list]
    except ValueError as e:
        raise ConfigurationError(str(e)) from None
    for tm in tms:
        _check_protocol(pipeline, attack, tm)
    data = _as_batch(data)
    return [evaluate(pipeline, data, attack, tm, **kwargs) for tm in tms]


DEFAULT_ROSTER = (
    (NO_ATTACK, Knowledge.BLACK_BOX_TRANSFER),
    ("mifgsm20", Knowledge.BLACK_BOX_TRANSFER),
    ("pgd7", Knowledge.BLACK_BOX_TRANSFER),
    ("pgd40", Knowledge.BLACK_BOX_TRANSFER),
    ("bpda_i40", Knowledge.ADAPTIVE_BPDA),
)


@dataclass
class AblationResult:
    records: list[EvalRecord]
    failures: dict[str, str]
    purifiers: dict[str, PurifierPair] = field(default_factory=dict, repr=False)


def cell_name(overrides: Sequence[str]) -> str:
    return "capgan" if not overrides else "capgan[" + ",".join(overrides) + "]"


def run_ablation(
    grid: Iterable[Sequence[str]],
    base: ExperimentConfig,
    *,
    domains,
    classifier: nn.Module,
    surrogate: nn.Module,
    test: ImageBatch | ImageDataset,
    epsilon: float = 8.0,
    roster=DEFAULT_ROSTER,
    seed: int | None = None,
    batch_size: int = 200,
    keep_purifiers: bool = False,
) -> AblationResult:
    """Train one purifier per cell (a list of config overrides) and evaluate the roster.

    A failing cell is recorded in ``failures`` and the grid continues.
    """
    from capgan.training import train_capgan

    test = _as_batch(test)
    result = AblationResult([], {})
    for overrides in grid:
        overrides = list(overrides)
        name = cell_name(overrides)
        try:
            cfg = apply_overrides(base, overrides)
            pair = train_capgan(domains, classifier, cfg, seed=seed).pair
            pipe = DefensePipeline.with_purifier(classifier, pair, name, surrogate)
            for attack, knowledge in roster:
                tm = ThreatModel(knowledge, PerturbationBudget(epsilon))
                result.records.append(evaluate(pipe, test, attack, tm, seed=seed, batch_size=batch_size))
            if keep_purifiers:
                result.purifiers[name] = pair
        except Exception as e:  # noqa: BLE001 - grid keeps going, failure is reported
            log.exception("ablation cell %s failed", name)
            result.failures[name] = f"{type(e).__name__}: {e}"
    return result


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.=+-]+", "_", text).strip("_")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_records_csv(records: Sequence[EvalRecord], path: str | os.PathLike) -> None:
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])


def read_records_csv(path: str | os.PathLike) -> list[EvalRecord]:
    types = {f.name: f.type for f in fields(EvalRecord)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                if t in ("float", float):
                    kw[k] = float(v)
                elif t in ("int", int):
                    kw[k] = int(v)
                elif t in ("bool", bool):
                    kw[k] = v == "True"
                else:
                    kw[k] = v
            out.append(EvalRecord(**kw))
    return out


def emit_report(records: Sequence[EvalRecord], out_dir: str | os.PathLike, stem: str = "results",
                plots: bool = True) -> dict[str, Path]:
    """Write ``<stem>.csv``, ``<stem>.json`` and one ``{attack}_{defense}_sweep.png`` per pair."""
    records = list(records)
    if not records:
        raise ValueError("emit_report needs at least one record")
    out_dir = Path(out_dir)
    written: dict[str, Path] = {}
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    try:
        write_records_csv(records, csv_path)
        atomic_write_text(json_path, json.dumps([asdict(r) for r in records], indent=2) + "\n")
    except OSError as e:
        raise ReportError(f"cannot write report to {out_dir}: {e}") from e
    written["csv"], written["json"] = csv_path, json_path
    if plots:
        groups: dict[tuple[str, str], list[EvalRecord]] = {}
        for r in records:
            groups.setdefault((r.attack, r.defense), []).append(r)
        for (attack, defense), rs in groups.items():
            path = out_dir / f"{_slug(attack)}_{_slug(defense)}_sweep.png"
            _plot_sweep(sorted(rs, key=lambda r: r.epsilon), attack, defense, path)
            written[f"plot:{attack}:{defense}"] = path
    return written


def _plot_sweep(rs: list[EvalRecord], attack: str, defense: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eps = [r.epsilon for r in rs]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(eps, [r.accuracy for r in rs], "o-", label="accuracy")
    ax.plot(eps, [r.success_rate for r in rs], "s--", label="attack success")
    ax.set_xlabel("epsilon (1/255)")
    ax.set_ylabel("%")
    ax.set_ylim(-2, 102)
    ax.set_title(f"{attack} vs {defense}", fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    try:
        with atomic_open(path, "wb") as fh:
            fig.savefig(fh, format="png")
    except OSError as e:
        raise ReportError(f"cannot write plot {path}: {e}") from e
    finally:
        plt.close(fig)


def summarize(records: Sequence[EvalRecord]) -> str:
    """Plain-text table of records, one line each."""
    lines = [f"{'defense':<28} {'attack':<10} {'eps':>5} {'protocol':<20} {'clean':>6} {'acc':>6} {'succ':>6}"]
    for r in records:
        lines.append(f"{r.defense[:28]:<28} {r.attack:<10} {r.epsilon:>5g} {r.protocol:<20} "
                     f"{r.clean_accuracy:>6.2f} {r.accuracy:>6.2f} {r.success_rate:>6.2f}")
    return "\n".join(lines)

