# Box geometry walkthrough: IoU values and greedy per-class suppression.

import numpy as np

from opis import BBox, ScoredBox, iou, nms, pairwise_iou

a = BBox(0, 0, 2, 2)
b = BBox(1, 1, 3, 3)
c = BBox(10, 10, 12, 12)

print("iou(a, a) =", iou(a, a))        # identical boxes -> 1.0
print("iou(a, b) =", iou(a, b))        # overlap 1 / union 7
print("iou(a, c) =", iou(a, c))        # disjoint -> 0.0

# the vectorized form gives the full matrix in one call
boxes = np.array([box.as_array() for box in (a, b, c)])
print("\npairwise IoU matrix:")
print(np.round(pairwise_iou(boxes, boxes), 4))

# NMS keeps the best box of each overlap group, per class
dets = [
    ScoredBox(BBox(0, 0, 2, 2), 0.90, 1),
    ScoredBox(BBox(0.1, 0, 2.1, 2), 0.80, 1),   # heavy overlap with the first -> suppressed
    ScoredBox(BBox(1, 1, 3, 3), 0.70, 1),       # iou 1/7 < 0.3 -> survives
    ScoredBox(BBox(0, 0, 2, 2), 0.60, 2),       # other class -> untouched
]
kept = nms(dets, iou_threshold=0.3)
print("\nkept after NMS at 0.3:")
for d in kept:
    print(f"  class {d.class_id} score {d.score:.2f} box ({d.box.x1}, {d.box.y1}, {d.box.x2}, {d.box.y2})")
