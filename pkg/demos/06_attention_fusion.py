"""Patch attention mechanics and a short refinement training run on a
synthetic copy task where the retrievals contain the answer.
"""

import numpy as np

from retrivox import tensor as T
from retrivox import (FusionConfig, FusionModel, HyperParams,
                      attention_scores, attention_weights, blend)
from retrivox.fusion import RefineRecord, train_refinement
from retrivox.grids import ChunkLayout

# Scores are cosines between 32-d projections; the softmax sharpness C
# pushes mass onto the best retrieval instead of averaging them.
rng = np.random.default_rng(0)
h_in = rng.normal(size=8)
h_in /= np.linalg.norm(h_in)
h_retr = rng.normal(size=(4, 8))
h_retr /= np.linalg.norm(h_retr, axis=1, keepdims=True)
s = attention_scores(h_in, h_retr)
print("scores:", np.round(s, 3))
for C in (1, 10, 100):
    print(f"  C={C:>3}: weights {np.round(attention_weights(s, C), 3)}")

# The blend coefficient beta decides input vs retrieval contribution from
# the best score; c, d are learnable in the model.
p_in = np.zeros(4)
p_retr = np.ones((4, 4))
print("beta high (c=50):", np.round(blend(p_in, p_retr, s, 10, 50, 0), 3))
print("beta low  (d=-50):", np.round(blend(p_in, p_retr, s, 10, 0, -50), 3))

# Train a small fusion model where rank-0 retrievals equal the target:
# attention learns to copy them and the reconstruction error collapses.
layout = ChunkLayout(16, 8, 4)
cfg = FusionConfig(layout=layout, k=2, mode="attention", feat_channels=16,
                   base_channels=8, retr_base_channels=4, attn_dim=8)
hp = HyperParams(batch_refine=4)
records = []
for i in range(8):
    gt = (np.random.default_rng(i).random((16, 16, 16)) > 0.8).astype(np.float32)
    noise = np.random.default_rng(100 + i).random((16, 16, 16)).astype(np.float32)
    records.append(RefineRecord(input_up=gt.copy(), gt=gt,
                                approx=np.stack([gt, noise])))
model, log = train_refinement(records, cfg, hp, seed=0, iters=120, lr=2e-3,
                              log_every=30)
for it, loss in log:
    print(f"iter {it:>3}: loss {loss:.4f}")
