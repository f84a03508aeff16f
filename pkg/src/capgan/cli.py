"""Command-line entry point.

Every verb reads a JSON config (``--config``), applies ``--set key=value``
overrides, writes ``resolved.json`` plus its outputs into ``--out`` and reads
earlier stages' files from the ``--inputs`` directories:

==================== ============================== ==========================
verb                 reads                          writes
==================== ============================== ==========================
train-classifier     dataset                        target.ckpt, surrogate.ckpt,
                                                    classifier_metrics.json
build-domain         target.ckpt                    domain.ckpt
train-capgan         target.ckpt, domain.ckpt       purifier.ckpt, train_log.csv
evaluate             target/surrogate/purifier      results.csv/.json
sweep                target/surrogate/purifier      results.csv/.json, plots
ablate               target/surrogate, domain.ckpt  ablation.csv/.json
report               results CSV files              report.csv/.json, plots
dump-embeddings      target.ckpt                    embeddings.csv
==================== ============================== ==========================

Exit codes: 0 success, 1 usage error (nothing written), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import torch

VERBS = ("train-classifier", "build-domain", "train-capgan", "evaluate", "sweep", "ablate", "report", "dump-embeddings")
KNOWLEDGE = ("BLACK_BOX_TRANSFER", "BLACK_BOX_QUERY", "WHITE_BOX_TARGET", "WHITE_BOX_END2END", "ADAPTIVE_BPDA")

log = logging.getLogger("capgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _nonneg(flag):
    def conv(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}") from None
        if v < 0:
            raise argparse.ArgumentTypeError(f"{flag} must be >= 0, got {text}")
        return v
    return conv


def _positive_int(flag):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{flag} must be >= 1, got {text}")
        return v
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="capgan", description="Train and evaluate the cycle-consistent purifier.")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--out", help="output directory (default runs/<timestamp>)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--inputs", action="append", default=[], metavar="DIR",
                        help="directory holding earlier stages' outputs (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    tc = sub.add_parser("train-classifier", parents=[common], help="train target and surrogate classifiers")
    tc.add_argument("--adversarial", action="store_true", help="also train the PGD-7 adversarially trained baseline")
    tc.add_argument("--no-surrogate", action="store_true")

    sub.add_parser("build-domain", parents=[common], help="FGSM the training set into the adversarial domain")

    tg = sub.add_parser("train-capgan", parents=[common], help="train the purifier")
    tg.add_argument("--resume", help="training checkpoint to continue from")

    for verb in ("evaluate", "sweep"):
        e = sub.add_parser(verb, parents=[common], help=f"{verb} defenses under attack")
        e.add_argument("--attack", help="attack id (evaluate: default is the config roster)")
        e.add_argument("--protocol", choices=KNOWLEDGE, help="threat model (default derived from the attack)")
        e.add_argument("--defense", choices=("undefended", "capgan", "both"), default="both")
        e.add_argument("--query-limit", type=_positive_int("--query-limit"), help="per-image query budget")
        e.add_argument("--dump-attention", metavar="DIR", help="write purifier attention maps here")
        if verb == "evaluate":
            e.add_argument("--eps", type=_nonneg("--eps"), help="epsilon in 1/255 units")
        else:
            e.add_argument("--eps-list", help="comma separated epsilons (default: evaluation.eps_list)")

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate a grid of purifier configs")
    a.add_argument("--grid", nargs="+", default=[], metavar="KEY=V1,V2",
                   help="cartesian grid; bare keys refer to the capgan section")
    a.add_argument("--cell", action="append", default=[], metavar="K=V;K=V",
                   help="one explicit cell (repeatable), e.g. 'use_cam=false;use_sem=false'")
    a.add_argument("--eps", type=_nonneg("--eps"), default=8.0)

    r = sub.add_parser("report", parents=[common], help="merge result CSVs into a report with plots")
    r.add_argument("results", nargs="*", help="result CSV files (default: results.csv in --inputs)")

    d = sub.add_parser("dump-embeddings", parents=[common], help="pixel and logit vectors of clean/FGSM pairs")
    d.add_argument("--eps", type=_nonneg("--eps"), default=16.0)
    d.add_argument("--n", type=_positive_int("--n"), default=1000)
    return p


def _find(inputs: list[Path], name: str) -> Path:
    for d in inputs:
        if (d / name).is_file():
            return d / name
    raise UsageError(f"{name} not found in --inputs ({', '.join(map(str, inputs)) or 'none given'})")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _qualify(key: str) -> str:
    return key if "." in key else f"capgan.{key}"


def grid_cells(grid: list[str], cells: list[str]) -> list[list[str]]:
    """Expand ``key=v1,v2`` items into the cartesian product of override lists."""
    out = []
    if grid:
        axes = []
        for item in grid:
            key, sep, values = item.partition("=")
            if not sep or not values:
                raise UsageError(f"--grid item {item!r} is not KEY=V1,V2,...")
            axes.append([f"{_qualify(key)}={v}" for v in values.split(",")])
        out += [list(c) for c in itertools.product(*axes)]
    for cell in cells:
        items = [s for s in cell.split(";") if s]
        for s in items:
            if "=" not in s:
                raise UsageError(f"--cell item {s!r} is not KEY=VALUE")
        out.append([_qualify(s.split("=", 1)[0]) + "=" + s.split("=", 1)[1] for s in items])
    return out or [[]]


class _Run:
    """Validated arguments plus lazily loaded stage inputs."""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.inputs = [Path(p) for p in args.inputs]
        self.out: Path | None = None

    def data(self, split: str):
        from capgan.core.data import Subset, load_dataset

        ds = self.config.dataset
        cap = ds.train_cap if split == "train" else ds.test_cap
        subset = Subset(classes=ds.classes, cap=cap, relabel=ds.relabel) if (ds.classes is not None or cap is not None) else None
        return load_dataset(ds.resolved_path(), split, subset, batch_size=self.config.evaluation.batch_size)

    def classifier(self, name="target.ckpt"):
        from capgan.classifier import load_classifier

        return load_classifier(_find(self.inputs, name))

    def purifier(self):
        from capgan.training import load_purifier

        return load_purifier(_find(self.inputs, "purifier.ckpt"))


def _validate(args, parser) -> "_Run":
    from capgan.core.config import ConfigError, apply_overrides, load_config

    config = load_config(args.config)
    config = apply_overrides(config, args.overrides)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    if not config.attacks and args.verb == "evaluate" and not getattr(args, "attack", None):
        raise ConfigError("no attack given and the config roster is empty")
    run = _Run(args, config)
    for d in run.inputs:
        if not d.is_dir():
            raise UsageError(f"--inputs directory {d} does not exist")
    needs = {
        "build-domain": ["target.ckpt"],
        "train-capgan": ["target.ckpt", "domain.ckpt"],
        "ablate": ["target.ckpt", "surrogate.ckpt", "domain.ckpt"],
        "dump-embeddings": ["target.ckpt"],
        "evaluate": ["target.ckpt"],
        "sweep": ["target.ckpt"],
    }
    for name in needs.get(args.verb, []):
        _find(run.inputs, name)
    if args.verb in ("evaluate", "sweep"):
        from capgan.attacks import ATTACKS

        attack = args.attack
        if attack is not None and attack != "none" and attack not in ATTACKS:
            raise UsageError(f"--attack: unknown attack {attack!r}")
        if args.verb == "sweep" and attack is None:
            raise UsageError("sweep needs --attack")
        if args.defense in ("capgan", "both"):
            _find(run.inputs, "purifier.ckpt")
        if args.verb == "sweep" and args.eps_list:
            try:
                eps = [float(v) for v in args.eps_list.split(",")]
            except ValueError:
                raise UsageError(f"--eps-list: not a list of numbers: {args.eps_list!r}") from None
            if any(v < 0 for v in eps) or any(b < a for a, b in zip(eps, eps[1:])):
                raise UsageError("--eps-list must be ascending non-negative numbers")
            args.eps_values = eps
        elif args.verb == "sweep":
            args.eps_values = list(config.evaluation.eps_list)
        args.plan = _plan(args, config)
        if any(tm.knowledge.value == "BLACK_BOX_TRANSFER" and a != "none" for a, tm in args.plan):
            _find(run.inputs, "surrogate.ckpt")
    if args.verb == "ablate":
        args.cells = grid_cells(args.grid, args.cell)
        for cell in args.cells:
            apply_overrides(config, cell)
    if args.verb == "report" and not args.results:
        args.results = [str(_find(run.inputs, "results.csv"))]
    if args.verb == "report":
        for r in args.results:
            if not Path(r).is_file():
                raise UsageError(f"results file {r} does not exist")
    if args.verb == "train-capgan" and args.resume and not Path(args.resume).is_file():
        raise UsageError(f"--resume: {args.resume} does not exist")
    return run


def _threat(attack: str, protocol: str | None, eps: float, query_limit: int | None):
    from capgan.attacks import get_attack
    from capgan.attacks.registry import BPDA, QUERY
    from capgan.core.types import Knowledge, PerturbationBudget, ThreatModel

    if protocol is None:
        if attack == "none":
            protocol = "BLACK_BOX_TRANSFER"
        else:
            iface = get_attack(attack).interface
            protocol = {QUERY: "BLACK_BOX_QUERY", BPDA: "ADAPTIVE_BPDA"}.get(iface, "BLACK_BOX_TRANSFER")
    if protocol == "BLACK_BOX_QUERY" and query_limit is None:
        query_limit = 10000
    if protocol != "BLACK_BOX_QUERY":
        query_limit = None
    return ThreatModel(Knowledge(protocol), PerturbationBudget(eps), query_limit)


def _plan(args, cfg):
    """Resolve (attack, ThreatModel) pairs for evaluate/sweep and check each one."""
    from capgan.evalharness import check_attack_protocol

    if args.verb == "sweep":
        plan = [(args.attack, e) for e in args.eps_values]
        plan = [(a, args.protocol, e, args.query_limit) for a, e in plan]
    elif args.attack is not None:
        plan = [(args.attack, args.protocol, 8.0 if args.eps is None else args.eps, args.query_limit)]
    else:
        plan = [("none", None, 0.0, None)]
        for entry in cfg.attacks:
            eps = entry.epsilon if args.eps is None else args.eps
            plan.append((entry.name, entry.knowledge, eps, entry.query_limit or args.query_limit))
    out = []
    for attack, protocol, eps, q in plan:
        try:
            tm = _threat(attack, protocol, eps, q)
        except ValueError as e:
            raise UsageError(f"{attack}: {e}") from None
        check_attack_protocol(attack, tm.knowledge)
        out.append((attack, tm))
    return out


def _pipelines(run: _Run, protocol_needs_surrogate: bool):
    from capgan.evalharness import DefensePipeline

    f = run.classifier()
    surrogate = None
    if protocol_needs_surrogate:
        surrogate = run.classifier("surrogate.ckpt")
    out = []
    if run.args.defense in ("undefended", "both"):
        out.append(DefensePipeline.undefended(f, surrogate))
    if run.args.defense in ("capgan", "both"):
        out.append(DefensePipeline.with_purifier(f, run.purifier(), "capgan", surrogate))
    return out


def _cmd_train_classifier(run: _Run) -> None:
    from capgan.classifier import Schedule, accuracy, adversarial_train, save_classifier, train_classifier
    from capgan.core.types import PerturbationBudget

    cfg = run.config
    train, test = run.data("train"), run.data("test")
    schedule = Schedule.from_config(cfg.classifier)
    metrics = {}
    f = train_classifier(train, schedule, role="target", seed=cfg.seed)
    save_classifier(f, run.out / "target.ckpt")
    metrics["target_clean_accuracy"] = accuracy(f, test)
    if not run.args.no_surrogate:
        fs = train_classifier(train, schedule, role="surrogate", seed=cfg.seed + cfg.classifier.surrogate_seed_offset)
        save_classifier(fs, run.out / "surrogate.ckpt")
        metrics["surrogate_clean_accuracy"] = accuracy(fs, test)
    if run.args.adversarial:
        at = adversarial_train(train, PerturbationBudget(8, step_size=2, steps=7), schedule, seed=cfg.seed)
        save_classifier(at, run.out / "adversarially_trained.ckpt")
        metrics["at_clean_accuracy"] = accuracy(at, test)
    _write_json(run.out / "classifier_metrics.json", metrics)
    print(json.dumps(metrics, indent=2))


def _cmd_build_domain(run: _Run) -> None:
    from capgan.core.checkpoint import save_checkpoint
    from capgan.core.types import PerturbationBudget
    from capgan.training import build_adversarial_domain

    eps = run.config.capgan.domain_epsilon
    dom = build_adversarial_domain(run.classifier(), run.data("train"), PerturbationBudget(eps, step_size=max(eps, 1.0)),
                                   seed=run.config.seed)
    save_checkpoint(_domain_state(dom), run.out / "domain.ckpt")
    print(f"domain: {len(dom)} pairs, epsilon {eps:g}")


def _domain_state(dom) -> dict:
    return {"kind": "domain", "clean": dom.clean.pixels, "adversarial": dom.adversarial.pixels,
            "labels": dom.clean.labels, "attack": dom.attack, "epsilon": dom.epsilon, "seed": dom.seed}


def _load_domain(path):
    from capgan.core.checkpoint import load_checkpoint
    from capgan.core.types import ImageBatch
    from capgan.training import PairedDomains

    s = load_checkpoint(path)
    return PairedDomains(ImageBatch(s["clean"], s["labels"]), ImageBatch(s["adversarial"], s["labels"]),
                         s["attack"], s["epsilon"], s["seed"])


def _cmd_train_capgan(run: _Run) -> None:
    from capgan.training import train_capgan

    dom = _load_domain(_find(run.inputs, "domain.ckpt"))
    res = train_capgan(dom, run.classifier(), run.config, out_dir=run.out, resume=run.args.resume)
    print(f"trained {len(res.log)} steps -> {run.out / 'purifier.ckpt'}")


def _cmd_evaluate(run: _Run) -> None:
    from capgan.evalharness import emit_report, evaluate, summarize

    args, cfg = run.args, run.config
    plan = args.plan
    needs_surrogate = any(tm.knowledge.value == "BLACK_BOX_TRANSFER" and a != "none" for a, tm in plan)
    pipes = _pipelines(run, needs_surrogate)
    test = run.data("test").as_batch()
    records = []
    for pipe in pipes:
        for attack, tm in plan:
            dump = args.dump_attention if pipe.defended else None
            records.append(evaluate(pipe, test, attack, tm, seed=cfg.seed, batch_size=cfg.evaluation.batch_size,
                                    dump_attention=dump))
    emit_report(records, run.out, "results", plots=False)
    print(summarize(records))


def _cmd_sweep(run: _Run) -> None:
    from capgan.evalharness import emit_report, evaluate, summarize

    args, cfg = run.args, run.config
    tms = [tm for _, tm in args.plan]
    pipes = _pipelines(run, any(tm.knowledge.value == "BLACK_BOX_TRANSFER" for tm in tms))
    test = run.data("test").as_batch()
    records = [evaluate(p, test, args.attack, tm, seed=cfg.seed, batch_size=cfg.evaluation.batch_size,
                        dump_attention=args.dump_attention if p.defended else None)
               for p in pipes for tm in tms]
    emit_report(records, run.out, "results")
    print(summarize(records))


def _cmd_ablate(run: _Run) -> None:
    from capgan.evalharness import emit_report, run_ablation, summarize

    res = run_ablation(
        run.args.cells, run.config,
        domains=_load_domain(_find(run.inputs, "domain.ckpt")),
        classifier=run.classifier(), surrogate=run.classifier("surrogate.ckpt"),
        test=run.data("test"), epsilon=run.args.eps, seed=run.config.seed,
        batch_size=run.config.evaluation.batch_size,
    )
    if res.records:
        emit_report(res.records, run.out, "ablation", plots=False)
        print(summarize(res.records))
    if res.failures:
        _write_json(run.out / "ablation_failures.json", res.failures)
        for name, err in res.failures.items():
            print(f"cell {name} failed: {err}", file=sys.stderr)
        if not res.records:
            raise RuntimeError("every ablation cell failed")


def _cmd_report(run: _Run) -> None:
    from capgan.evalharness import emit_report, read_records_csv, summarize

    records = [r for path in run.args.results for r in read_records_csv(path)]
    if not records:
        raise RuntimeError("the given result files hold no records")
    emit_report(records, run.out, "report")
    print(summarize(records))


def _cmd_dump_embeddings(run: _Run) -> None:
    from capgan.attacks import DifferentiableTarget, fgsm
    from capgan.classifier import export_embeddings
    from capgan.core.types import PerturbationBudget

    f = run.classifier()
    test = run.data("test").as_batch()[: run.args.n]
    eps = run.args.eps
    adv = fgsm(DifferentiableTarget(f), test, PerturbationBudget(eps, step_size=max(eps, 1.0)))
    export_embeddings(f, test, adv, run.out / "embeddings.csv")
    print(f"wrote {4 * len(test)} rows to {run.out / 'embeddings.csv'}")


COMMANDS = {
    "train-classifier": _cmd_train_classifier,
    "build-domain": _cmd_build_domain,
    "train-capgan": _cmd_train_capgan,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
    "dump-embeddings": _cmd_dump_embeddings,
}


def _write_json(path: Path, obj) -> None:
    from capgan.core.io import atomic_write_text

    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run(argv: list[str] | None = None) -> int:
    from capgan.core.config import ConfigError, save_config
    from capgan.core.seeding import set_global_seed
    from capgan.evalharness import ConfigurationError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        runner = _validate(args, parser)
    except (UsageError, ConfigError, ConfigurationError) as e:
        print(str(e), file=sys.stderr)
        if not isinstance(e, UsageError):
            print(parser.format_usage().rstrip(), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    runner.out = Path(args.out) if args.out else Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    try:
        runner.out.mkdir(parents=True, exist_ok=True)
        save_config(runner.config, runner.out / "resolved.json")
        set_global_seed(runner.config.seed)
        torch.set_num_threads(max(torch.get_num_threads(), 1))
        COMMANDS[args.verb](runner)
    except (UsageError, ConfigError, ConfigurationError) as e:
        print(f"capgan {args.verb}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        log.debug("failure", exc_info=True)
        print(f"capgan {args.verb} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
