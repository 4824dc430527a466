# Ablation-style comparison at reduced scale: train each method flag on the
# same seeds and tabulate mAP / CorLoc medians. The full-scale version runs
# through `opis compare` (or the acceptance suite) and shows the same ordering.

import statistics

from opis import TrainConfig, evaluate_scenes, generate_dataset, train

METHODS = ("baseline", "pib_only", "pir_only", "opis")
SEEDS = (0, 1, 2)

base = TrainConfig(scenes_per_epoch=80, epochs=25, eval_scenes=50)
print(f"{base.total_iterations} iterations per run, {len(SEEDS)} seeds per method\n")

eval_scenes = generate_dataset(base.scene, base.eval_seed, base.eval_scenes)

print(f"{'method':10s} {'mAP median':>11s} {'CorLoc median':>14s}")
for method in METHODS:
    maps, corlocs = [], []
    for seed in SEEDS:
        config = TrainConfig(
            seed=seed, method=method,
            scenes_per_epoch=base.scenes_per_epoch, epochs=base.epochs, eval_scenes=base.eval_scenes,
        )
        dataset = generate_dataset(config.scene, config.seed, config.scenes_per_epoch)
        model, _ = train(config, dataset)
        report, _ = evaluate_scenes(model, eval_scenes)
        maps.append(report.mean_ap)
        corlocs.append(report.corloc)
    print(f"{method:10s} {statistics.median(maps):11.4f} {statistics.median(corlocs):14.4f}")

# expected shape: both sampling (pib_only) and reweighting (pir_only) beat the
# plain baseline, and the combination ranks at or near the top
