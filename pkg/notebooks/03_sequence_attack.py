"""
Attacking a whole scan
======================

One perturbation of a stretch of the demo scan flips every sliding window
that covers a channeling event, while windows away from the perturbation keep
their labels. Afterwards we grow a single adversarial window into a longer
consistent sequence, one new sample at a time.

Writes ``seq_demo_probs.csv`` (per-window probabilities, clean and perturbed)
to the current directory. Run with ``python notebooks/03_sequence_attack.py``.
"""

import csv

import numpy as np

from blmrobust import (
    ArchConfig,
    PgdConfig,
    StructuredBudget,
    TrainConfig,
    build_model,
    demo_trace,
    make_dataset,
    maximal_adv_sequence_under_attack,
    run_config,
    sequence_attack,
    smoothness,
    train_clean,
)
from blmrobust.sequence import classification_sequence, seed_sequence

W = 128
params, _ = train_clean(build_model(ArchConfig(scale_factor=0.125), 0), make_dataset(seed=0),
                        TrainConfig(epochs=10, seed=0))
budget = StructuredBudget.from_pair(0.10, 0.02)
pgd = PgdConfig(steps=40, seed=0)

# %%
# Clean labels along the scan: channeling while the event sits inside the window.
values = demo_trace().values
clean = classification_sequence(params, values, W)
runs = np.flatnonzero(np.diff(clean.labels)) + 1
print("label changes at origins", runs.tolist(), "labels", clean.labels[np.r_[0, runs]].tolist())

# %%
# Sixteen target windows, one joint perturbation over their union.
res = sequence_attack(params, values, 200, 215, budget, pgd, W=W)
pert = classification_sequence(params, res.perturbed, W)
print(f"flipped {res.n_flips} of {res.n_goal} targets")
changed = np.flatnonzero(clean.labels != pert.labels)
print("windows whose label changed:", changed.min(), "to", changed.max())

# Label changes are confined to windows that overlap the perturbed samples.
touched = np.flatnonzero(np.any(res.perturbed != values, axis=1))
print("perturbed samples", touched.min(), "to", touched.max())

# %%
# How abruptly do the probabilities move from one window to the next?
for name, seq in (("clean", clean), ("perturbed", pert)):
    rep = smoothness(seq, kappa=0.5)
    print(f"{name:9s} max L1 step {rep.max_step:.3f}  smooth at 0.5: {rep.is_smooth}")

with open("seq_demo_probs.csv", "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["origin", "clean_p0", "clean_p1", "clean_p2", "pert_p0", "pert_p1", "pert_p2"])
    for j in range(len(clean)):
        w.writerow([j, *clean.probs[j], *pert.probs[j]])

# %%
# Growing a sequence
# ------------------
# Start from one adversarial window and keep exposing the next sample. Only
# that sample may be chosen; everything already perturbed stays fixed.
out = run_config("Baseline", params, values[250:250 + W], budget, pgd)
seed = seed_sequence(params, values, 250, out.reconstructed_delta, budget, W)
grown = maximal_adv_sequence_under_attack(params, values, seed, budget, pgd, max_length=8)
print(f"grew window 250 into windows {grown.start}..{grown.end} ({len(grown)} long), "
      f"consistent: {grown.consistent()}")
