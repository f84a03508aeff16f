"""
A tour of the attack library
============================

Runs every attack on a small freshly trained classifier over synthetic
colour-blob images, so it finishes in well under a minute on a laptop CPU.
"""

import torch

from capgan.attacks import (
    DifferentiableTarget,
    QueryTarget,
    cw_l2,
    fgsm,
    mi_fgsm,
    pgd,
    spsa,
    square_attack,
)
from capgan.classifier import ResidualClassifier, accuracy
from capgan.core import ImageBatch, PerturbationBudget

torch.manual_seed(0)
torch.set_num_threads(1)

# %%
# Data: three classes, each a noisy version of one colour.
palette = torch.tensor([[0.55, 0.45, 0.45], [0.45, 0.55, 0.45], [0.45, 0.45, 0.55]])
labels = torch.arange(300) % 3
pixels = (palette[labels][:, None, None, :] + 0.1 * torch.randn(300, 16, 16, 3)).clamp(0, 1)
train, test = ImageBatch(pixels[:240], labels[:240]), ImageBatch(pixels[240:], labels[240:])

# %%
# A width-4 residual classifier trained for a few hundred Adam steps.
model = ResidualClassifier(3, width=4)
opt = torch.optim.Adam(model.parameters(), lr=3e-3)
for step in range(200):
    idx = torch.randint(0, len(train), (32,))
    loss = torch.nn.functional.cross_entropy(model(train.pixels[idx]), train.labels[idx])
    opt.zero_grad()
    loss.backward()
    opt.step()
model.freeze()
print(f"clean accuracy: {accuracy(model, test):.1f}%")

# %%
# Gradient attacks receive a DifferentiableTarget; epsilons are in 1/255 units.
target = DifferentiableTarget(model)
budget = PerturbationBudget(16, step_size=4, steps=10)
for name, adv in [
    ("fgsm", fgsm(target, test, PerturbationBudget(16))),
    ("pgd", pgd(target, test, budget)),
    ("mi-fgsm", mi_fgsm(target, test, budget)),
    ("cw-l2", cw_l2(target, test, kappa=5, steps=100, search_steps=3).adversarial),
]:
    print(f"{name:>8}: {accuracy(model, adv):5.1f}%  max |delta| = {255 * (adv.pixels - test.pixels).abs().max():.1f}/255")

# %%
# Query attacks only get logits through a counting oracle.
oracle = QueryTarget(model)
res = square_attack(oracle, test, PerturbationBudget(16), query_cap=300)
print(f"  square: {accuracy(model, res.adversarial):5.1f}%  queries used: {oracle.queries}")
oracle = QueryTarget(model)
res = spsa(oracle, test[:10], PerturbationBudget(16), spsa_batch=64, iters=60, lr=0.02)
print(f"    spsa: {accuracy(model, res.adversarial):5.1f}% on 10 images, queries used: {oracle.queries}")
