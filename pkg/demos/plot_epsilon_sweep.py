"""
Accuracy versus perturbation size
=================================

Sweeps a transfer PGD attack over epsilon for an undefended classifier and
writes the accuracy / attack-success curve. Uses checkpoints written by the
``capgan train-classifier`` command.

    capgan train-classifier --config configs/desk.json --out runs/clf
    python demos/plot_epsilon_sweep.py runs/clf
"""

import sys
from pathlib import Path

import torch

from capgan.classifier import load_classifier
from capgan.core import Knowledge, Subset, load_config, load_dataset
from capgan.evalharness import DefensePipeline, emit_report, epsilon_sweep, summarize

torch.set_num_threads(1)
run_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/clf")
cfg = load_config(run_dir / "resolved.json")
ds = cfg.dataset
test = load_dataset(ds.resolved_path(), "test", Subset(ds.classes, ds.test_cap, ds.relabel)).as_batch()

# %%
pipe = DefensePipeline.undefended(load_classifier(run_dir / "target.ckpt"), load_classifier(run_dir / "surrogate.ckpt"))
records = epsilon_sweep(pipe, test, "pgd7", cfg.evaluation.eps_list, Knowledge.BLACK_BOX_TRANSFER, seed=cfg.seed)
print(summarize(records))

# %%
# One PNG per (attack, defense): robust accuracy and attack success rate against epsilon.
files = emit_report(records, run_dir / "sweep")
print("\n".join(str(p) for p in files.values()))
