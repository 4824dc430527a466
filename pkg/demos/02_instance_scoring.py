# The dual-softmax instance scorer: one softmax over classes, one over
# proposals, composed by an element-wise product and summed into image-level
# class scores for the multi-label loss.

import numpy as np

from opis import (
    compose_instance_scores,
    image_scores,
    midn_loss,
    midn_loss_grad,
    softmax_over_classes,
    softmax_over_instances,
)

rng = np.random.default_rng(0)
C, P = 3, 6  # classes x proposals

x_cls = rng.normal(size=(C, P))
x_det = rng.normal(size=(C, P))

sc = softmax_over_classes(x_cls)    # columns sum to 1: "what class is this proposal"
sd = softmax_over_instances(x_det)  # rows sum to 1:    "which proposal shows this class"
print("column sums of class stream:", np.round(sc.sum(axis=0), 12))
print("row sums of detection stream:", np.round(sd.sum(axis=1), 12))

x_r = compose_instance_scores(sc, sd)
y_pred = image_scores(x_r)
print("\ncomposed scores (rounded):")
print(np.round(x_r, 3))
print("image-level class scores:", np.round(y_pred, 4))

# the image label says classes 1 and 3 are present (1-based)
y_true = np.array([1.0, 0.0, 1.0])
print("\nloss =", round(midn_loss(y_pred, y_true), 6))
print("dloss/dscore =", np.round(midn_loss_grad(y_pred, y_true), 4))

# present classes get pushed up (negative gradient), absent ones down
