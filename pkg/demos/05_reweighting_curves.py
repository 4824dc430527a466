# Positive-instance reweighting: the score/IoU exponential boost and its
# fine-tuning attenuation e^(-gamma * T).

import numpy as np

from opis import reweight_attenuated, reweight_normal

center_score = 0.6
beta, gamma = 0.5, 0.9

print("boost factor for a positive with center score 0.6:")
print("phi    IoU    normal weight")
for phi in (0.1, 0.5, 0.9):
    for i_r in (0.5, 0.9):
        w = reweight_normal(phi, i_r, beta, center_score)
        print(f"{phi:.1f}    {i_r:.1f}    {w:.4f}")

# high own-score and high IoU positives can earn up to e x the base weight
print("\nrange check: base", center_score, "max", round(np.e * center_score, 4))

print("\nattenuation over fine-tuning progress (phi=0.9, IoU=0.9):")
print("T      weight")
for t in np.linspace(0, 1, 6):
    w = reweight_attenuated(0.9, 0.9, beta, center_score, gamma, float(t))
    print(f"{t:.1f}    {w:.4f}")
# at T=0 the attenuated form equals the normal one exactly; by T=1 the boost
# has decayed by e^-0.9 so the shrunken negative set is not drowned out
