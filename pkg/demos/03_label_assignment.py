# How one refinement branch gets its supervision: the previous branch's top
# proposal per present class becomes a cluster center, and every proposal is
# positive / background / ignored by its best center IoU.

import numpy as np

from opis import assign_labels, select_cluster_centers

# a hand-built scene: proposals 0 and 3 sit on two objects, 1 overlaps the
# first loosely, 2 barely touches it, 4 is far away
proposals = np.array(
    [
        [10.0, 10.0, 30.0, 30.0],   # object A
        [14.0, 12.0, 33.0, 30.0],   # strong overlap with A
        [18.0, 18.0, 38.0, 38.0],   # weak overlap with A
        [60.0, 60.0, 80.0, 80.0],   # object B
        [0.0, 70.0, 10.0, 80.0],    # isolated clutter
    ]
)

# previous-branch scores over (classes + background) x proposals
phi_prev = np.array(
    [
        [0.70, 0.20, 0.05, 0.10, 0.02],  # class 1 peaks on proposal 0
        [0.05, 0.05, 0.05, 0.60, 0.03],  # class 2 peaks on proposal 3
        [0.25, 0.75, 0.90, 0.30, 0.95],  # background row
    ]
)
image_label = np.array([1, 1], dtype=np.int8)

centers = select_cluster_centers(phi_prev, image_label)
print("cluster centers (class -> proposal):", centers)

targets, assignment = assign_labels(centers, proposals, phi_prev, lambda_ig=0.1, lambda_ng=0.5)
names = {0: "ignored", 1: "positive c1", 2: "positive c2", 3: "background"}
for r in range(len(proposals)):
    print(
        f"proposal {r}: {names[int(targets.assigned_class[r])]:12s} "
        f"best-center IoU {targets.max_iou[r]:.3f} from class {targets.source_class[r]} "
        f"weight {targets.weight[r]:.2f}"
    )

print("\nper-class positives:", {c: v.tolist() for c, v in assignment.positives.items()})
print("per-class negatives:", {c: v.tolist() for c, v in assignment.negatives.items()})
# the centers carry their own previous-branch score as the loss weight
