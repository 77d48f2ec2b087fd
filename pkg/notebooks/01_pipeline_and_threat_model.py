"""
Preprocessing and the structured threat model
=============================================

A walk through what the deployed pipeline does to a window, how a structured
perturbation is built, and why an attack that perturbs the normalized input
directly can produce points no signal maps to.

Run with ``python notebooks/01_pipeline_and_threat_model.py``.
"""

import numpy as np

from blmrobust import StructuredBudget, admissibility_check, demo_trace, infeasibility_witness, preprocess
from blmrobust.pipeline import PAD_LENGTH, channel_stats
from blmrobust.threat import assemble_delta, in_preprocessed_image

# %%
# A window from the demo scan, centred on its channeling event.
trace = demo_trace()
x = trace.values[236:364]
print("window", x.shape, "channel means", x.mean(axis=0).round(3))

# %%
# z-normalize per channel, then left-pad with zeros to the model length.
pi = preprocess(x)
print("padded input", pi.z.shape, "padded rows", PAD_LENGTH - x.shape[0])
print("unpadded mean", pi.z[pi.mask[:, 0] > 0].mean(axis=0).round(12))
print("unpadded std ", pi.z[pi.mask[:, 0] > 0].std(axis=0).round(12))

# The classifier only ever sees such inputs, so scaling and shifting the raw
# signal changes nothing:
print("affine copy identical:", np.allclose(preprocess(3.0 * x + 7.0).z, pi.z, atol=1e-12))

# %%
# Structured perturbations
# ------------------------
# Every step gets a common shift shared by both channels plus a small
# independent part per channel. The variables live in [-1, 1].
budget = StructuredBudget.from_pair(0.10, 0.02)
rng = np.random.default_rng(0)
u = rng.uniform(-1, 1, size=(x.shape[0], 3))
delta = assemble_delta(u, budget)
print("largest entry per channel", np.abs(delta).max(axis=0).round(4), "<=", budget.per_channel)

# In signal units the budget is relative to the window's own spread.
sigma = channel_stats(x)[1][0, 0]
print("admissible:", admissibility_check(sigma * delta, x, budget).feasible)

# Opposite shifts on the two channels cannot come from a common shift of 0.10
# plus independent parts of 0.02:
bad = np.zeros_like(delta)
bad[0] = [0.12, -0.12]
print("opposite shifts admissible:", admissibility_check(sigma * bad, x, budget).feasible)

# %%
# Points outside the image of preprocessing
# -----------------------------------------
# Nudging a single normalized entry moves that channel's mean away from zero.
# No window normalizes to that, so an attack working on the normalized
# input can "succeed" on something that never reaches the deployed model.
for eps in (0.01, 0.1, 1.0):
    z_hat = infeasibility_witness(pi, eps)
    mean = z_hat[pi.mask[:, 0] > 0, 0].mean()
    print(f"eps={eps:<5} max change {np.abs(z_hat - pi.z).max():.3f}  "
          f"mean {mean:.2e}  reachable: {in_preprocessed_image(z_hat, pi.mask)}")
