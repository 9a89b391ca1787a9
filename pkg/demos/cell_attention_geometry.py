"""
Spatially biased cell attention
===============================

Attention logits between two cells drop by their centroid distance.  We pull
one cell away from another and watch the cell-to-cell weight fall, while the
CLS summary (which carries no position) only sees cell content.
"""

import numpy as np

from celleconet.attention_cell import attend_patch, spatial_bias
from celleconet.cohort import PatchRecord
from celleconet.mil_head import init_params

rng = np.random.default_rng(3)
params = init_params(d_patch=4, d_cell=6, d_model=8, rng=rng).cell

print("bias for cells at (0,0) and (0.3,0.4):\n", spatial_bias([(0, 0), (0.3, 0.4)]))

emb = rng.normal(size=6)
for dx in (0.0, 0.2, 0.4, 0.8):
    patch = PatchRecord(0, (0, 0), np.zeros(4), [2, 2], [[0.1, 0.5], [0.1 + dx, 0.5]],
                        np.stack([emb, emb]))
    s = attend_patch(patch, params)
    print(f"distance {dx:.1f}: A[cell1 -> cell2] = {s.attention[1, 2]:.4f}, "
          f"CLS row = {np.round(s.attention_row, 4)}")
