# The fine-tuning schedule and the two-stage negative sampler: equal-width
# IoU bins first (hard-negative bias), then a uniform top-up to the target
# floor(mu * n_pos), with mu decaying linearly from 20 to 4.

import numpy as np

from opis import SamplerRng, iou_bin_edges, neglect_threshold, progressive_t, ratio_mu
from opis.sampling import sample_negatives_detail

T0, T1 = 3120, 4000
print("iteration  T      mu      neglect I_t")
for t_n in (3120, 3340, 3560, 3780, 3999):
    t = progressive_t(t_n, T0, T1)
    print(f"{t_n:9d}  {t:.3f}  {ratio_mu(20, t):6.2f}  {neglect_threshold(0.05, 0.85, t_n, T1):.3f}")

print("\nbin edges over the negative IoU interval:", iou_bin_edges(0.1, 0.5))

# a synthetic negative pool: 60 easy, 25, 10, 5 hard (IoU rising toward 0.5)
rng = np.random.default_rng(1)
per_bin = [60, 25, 10, 5]
ious = np.concatenate(
    [rng.uniform(0.1 + j * 0.1 + 1e-6, 0.1 + (j + 1) * 0.1 - 1e-6, size=n) for j, n in enumerate(per_bin)]
)
indices = np.arange(ious.size)

for t_n in (3120, 3560, 3999):
    t = progressive_t(t_n, T0, T1)
    mu = ratio_mu(20, t)
    stream = SamplerRng(seed=0, scene_id=0, iteration=t_n, branch=1, class_id=1).generator()
    detail = sample_negatives_detail(indices, ious, n_pos=3, mu=mu, lambda_ig=0.1, lambda_ng=0.5, rng=stream)
    stage1 = [s.size for s in detail.stage1]
    print(
        f"\niteration {t_n}: mu={mu:.2f} target={detail.target} "
        f"stage1 per bin={stage1} stage2={detail.stage2.size} total={detail.selected.size}"
    )
    # as mu shrinks, the binned stage dominates and hard bins keep their quota
