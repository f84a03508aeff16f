"""
Desk-scale purifier pipeline
============================

Trains the target and surrogate classifiers on the 3-class CIFAR-10
subset, builds the FGSM domain, trains the purifier and compares the
undefended and purified classifier under transfer and BPDA attacks.

Expects the dataset prepared by ``scripts/prepare_cifar10.py`` under
``$CAPGAN_DATA_DIR`` (default ``/root/data/cifar10``). The full desk run
takes about an hour on one CPU core; pass ``--epochs 2`` for a quick look.
"""

import argparse
import os
from pathlib import Path

import torch

from capgan.classifier import Schedule, accuracy, train_classifier
from capgan.core import Knowledge, PerturbationBudget, Subset, ThreatModel, load_config, load_dataset
from capgan.core.config import apply_overrides
from capgan.evalharness import DefensePipeline, emit_report, evaluate, summarize
from capgan.training import build_adversarial_domain, train_capgan

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=None, help="purifier epochs (default: desk config)")
parser.add_argument("--out", default="runs/desk_demo")
args = parser.parse_args()
torch.set_num_threads(1)

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "desk.json")
if args.epochs is not None:
    cfg = apply_overrides(cfg, [f"capgan.epochs={args.epochs}"])
data_dir = os.environ.get("CAPGAN_DATA_DIR", cfg.dataset.path)

# %%
# The 3-class subset: automobile, frog, ship, relabelled to 0..2.
ds = cfg.dataset
train = load_dataset(data_dir, "train", Subset(ds.classes, ds.train_cap, ds.relabel))
test = load_dataset(data_dir, "test", Subset(ds.classes, ds.test_cap, ds.relabel)).as_batch()

# %%
# Target f and a transfer surrogate trained from a different seed.
schedule = Schedule.from_config(cfg.classifier)
f = train_classifier(train, schedule, seed=cfg.seed)
fs = train_classifier(train, schedule, role="surrogate", seed=cfg.seed + cfg.classifier.surrogate_seed_offset)
print(f"target clean accuracy {accuracy(f, test):.2f}%, surrogate {accuracy(fs, test):.2f}%")

# %%
# Domain A is a single FGSM pass over the training set.
domains = build_adversarial_domain(f, train, PerturbationBudget(cfg.capgan.domain_epsilon))
print(f"f on domain C {accuracy(f, domains.clean):.2f}%, on domain A {accuracy(f, domains.adversarial):.2f}%")

# %%
# Purifier training logs every step; the CSV lands next to the checkpoint.
result = train_capgan(domains, f, cfg, out_dir=args.out)
last = result.log[-1]
print(f"final step {last['step']}: cap_total {last['cap_total']:.3f}, disc_total {last['disc_total']:.3f}")

# %%
# Same adversarial images for both pipelines: the transfer attack only sees the surrogate.
undefended = DefensePipeline.undefended(f, fs)
defended = DefensePipeline.with_purifier(f, result.pair, "capgan", fs)
records = []
for eps in (8, 16):
    tm = ThreatModel(Knowledge.BLACK_BOX_TRANSFER, PerturbationBudget(eps))
    records += [evaluate(p, test, "pgd40", tm, seed=cfg.seed) for p in (undefended, defended)]
records.append(evaluate(defended, test, "bpda_i40", ThreatModel(Knowledge.ADAPTIVE_BPDA, PerturbationBudget(8)),
                        seed=cfg.seed))
print(summarize(records))
emit_report(records, args.out, "desk_results", plots=False)
