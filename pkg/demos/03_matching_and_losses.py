"""
Matching predictions to annotations
===================================

Each query predicts a point and a confidence. A minimum-cost one-to-one
assignment pairs queries with annotated points; matched queries are pulled
towards their point (L1) and pushed to high confidence (focal loss), the
rest are pushed to low confidence.
"""

import numpy as np

from vidcount import autodiff as ad
from vidcount.matching import (
    build_cost_matrix,
    focal_cls_loss,
    hungarian,
    point_l1_loss,
    total_loss,
)

preds = np.array([[0.10, 0.12], [0.52, 0.48], [0.90, 0.20], [0.40, 0.80]])
conf = np.array([0.80, 0.70, 0.05, 0.60])
gts = np.array([[0.50, 0.50], [0.12, 0.10], [0.45, 0.75]])

cost = build_cost_matrix(preds, conf, gts)
print("cost = |p - g|_1 - confidence")
print(np.round(cost, 3))

pairs = hungarian(cost)
print("assignment (query, point):", pairs)

l_cls = focal_cls_loss(conf, pairs).item()
l_loc = point_l1_loss(preds, gts, pairs).item()
print(f"focal {l_cls:.5f}  l1 {l_loc:.5f}")
print("weighted total with a density term of 0.4:", total_loss(l_cls, l_loc, 0.4).total)

# The assignment is held fixed while differentiating.
xy = ad.Tensor(preds, requires_grad=True)
with ad.Tape():
    g = ad.backpropagate(point_l1_loss(xy, gts, pairs))[xy]
print("L1 gradient per query (unmatched query 2 gets zero):")
print(g)
