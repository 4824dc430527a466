"""Command-line front end: train, evaluate, compare, gradcheck, sample-demo.

Configs are INI files with one section per concern (data, model, schedule,
sampler, reweight, train); unknown sections or keys are hard errors so a typo
in a hyperparameter name cannot silently fall back to a default. Exit codes:
0 success, 2 configuration error, 3 numerical failure. All primary outputs
are byte-deterministic for identical inputs; wallclock timings go to a
separate sidecar file.
"""

from __future__ import annotations

import argparse
import configparser
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluation import dump_detections, evaluate_scenes
from .harness import (
    METHODS,
    SceneConfig,
    ToyModel,
    TrainConfig,
    TrainingDivergence,
    finite_diff_check,
    forward,
    generate_dataset,
    generate_scene,
    train,
)
from .sampling import SamplerRng, ScheduleState, sample_negatives_detail
from .supervision import assign_labels, select_cluster_centers

__all__ = ["ConfigError", "load_config", "resolved_config_text", "main", "entrypoint"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Unreadable, unknown, or inconsistent configuration input."""


_SCHEMA: dict[str, dict[str, type]] = {
    "data": {
        "num_classes": int,
        "feature_dim": int,
        "num_proposals": int,
        "clutter_rate": float,
        "jitter": float,
        "feature_noise": float,
        "min_objects": int,
        "max_objects": int,
        "world_size": float,
        "object_size_min": float,
        "object_size_max": float,
        "clutter_size_min": float,
        "clutter_size_max": float,
        "coverage_iou": float,
        "max_regen_attempts": int,
        "prototype_seed": int,
    },
    "model": {"refinements": int, "init_scale": float},
    "schedule": {"t0_fraction": float},
    "sampler": {"mu_s": float, "alpha": float, "i_0": float, "lambda_ig": float, "lambda_ng": float},
    "reweight": {"beta": float, "gamma": float},
    "train": {
        "seed": int,
        "method": str,
        "scenes_per_epoch": int,
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "lr_decay": float,
        "momentum": float,
        "weight_decay": float,
        "eval_scenes": int,
        "eval_seed": int,
        "nms_iou": float,
        "score_floor": float,
    },
}


def load_config(path: str | Path) -> TrainConfig:
    """Parse and validate an INI config into a TrainConfig."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(p.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc

    scene_kwargs: dict = {}
    train_kwargs: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key '{key}' in section [{section}]")
            typ = _SCHEMA[section][key]
            try:
                value = typ(raw) if typ is not str else raw.strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for key '{key}' in section [{section}]: {raw!r}") from exc
            if section == "data":
                scene_kwargs[key] = value
            else:
                train_kwargs[key] = value
    try:
        scene = SceneConfig(**scene_kwargs)
        return TrainConfig(scene=scene, **train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fmt_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def resolved_config_text(config: TrainConfig) -> str:
    """Canonical INI echo of every key at its resolved value."""
    values = {
        "data": {k: getattr(config.scene, k) for k in _SCHEMA["data"]},
        "model": {"refinements": config.refinements, "init_scale": config.init_scale},
        "schedule": {"t0_fraction": config.t0_fraction},
        "sampler": {k: getattr(config, k) for k in _SCHEMA["sampler"]},
        "reweight": {"beta": config.beta, "gamma": config.gamma},
        "train": {k: getattr(config, k) for k in _SCHEMA["train"]},
    }
    lines = []
    for section in _SCHEMA:
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            lines.append(f"{key} = {_fmt_value(values[section][key])}")
        lines.append("")
    return "\n".join(lines)


def _apply_overrides(config: TrainConfig, args: argparse.Namespace) -> TrainConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        updates["method"] = args.method
    if getattr(args, "iterations_override", None) is not None:
        updates["iterations_override"] = args.iterations_override
    try:
        return replace(config, **updates) if updates else config
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _worker_count(cells: int) -> int:
    cap = os.environ.get("OPIS_THREADS")
    limit = os.cpu_count() or 1
    if cap is not None:
        try:
            limit = max(1, int(cap))
        except ValueError as exc:
            raise ConfigError(f"OPIS_THREADS must be an integer, got {cap!r}") from exc
    return max(1, min(limit, cells))


def _run_cell(payload: tuple[TrainConfig, str, int]) -> tuple[str, int, float, float]:
    config, method, seed = payload
    cfg = replace(config, method=method, seed=seed)
    dataset = generate_dataset(cfg.scene, cfg.seed, cfg.scenes_per_epoch)
    model, _ = train(cfg, dataset)
    eval_scenes = generate_dataset(cfg.scene, cfg.eval_seed, cfg.eval_scenes)
    report, _ = evaluate_scenes(model, eval_scenes, nms_iou=cfg.nms_iou, score_floor=cfg.score_floor)
    return method, seed, report.mean_ap, report.corloc


def cmd_train(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(config.scene, config.seed, config.scenes_per_epoch)
    model, log = train(config, dataset)
    log.write_csv(out / "trainlog.csv")
    log.write_timing_csv(out / "timing.csv")
    (out / "model.json").write_text(model.to_json())
    (out / "resolved_config.ini").write_text(resolved_config_text(config))
    print(f"trained {config.method} for {config.total_iterations} iterations -> {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    model_path = Path(args.model)
    if not model_path.is_file():
        raise ConfigError(f"model file not found: {model_path}")
    model = ToyModel.from_json(model_path.read_text())
    if model.num_classes != config.scene.num_classes or model.feature_dim != config.scene.feature_dim:
        raise ConfigError(
            f"model shape ({model.num_classes} classes, {model.feature_dim} dims) does not match "
            f"config data section ({config.scene.num_classes}, {config.scene.feature_dim})"
        )
    dataset_seed = args.dataset_seed if args.dataset_seed is not None else config.eval_seed
    scenes = generate_dataset(config.scene, dataset_seed, config.eval_scenes)
    report, records = evaluate_scenes(model, scenes, nms_iou=config.nms_iou, score_floor=config.score_floor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "detections.jsonl").write_text(dump_detections(records))
    print(f"mAP={report.mean_ap:.4f} CorLoc={report.corloc:.4f} over {report.num_scenes} scenes -> {out}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method '{m}' (choose from {', '.join(METHODS)})")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"seeds must be a comma-separated list of integers, got {args.seeds!r}") from exc
    if not methods or not seeds:
        raise ConfigError("need at least one method and one seed")

    cells = [(config, m, s) for m in methods for s in seeds]
    workers = _worker_count(len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    by_key = {(m, s): (ap, cl) for m, s, ap, cl in results}
    lines = ["method,seed,map,corloc"]
    for m in methods:
        for s in sorted(seeds):
            ap, cl = by_key[(m, s)]
            lines.append(f"{m},{s},{ap!r},{cl!r}")
    for m in methods:
        ap_med = statistics.median(by_key[(m, s)][0] for s in seeds)
        cl_med = statistics.median(by_key[(m, s)][1] for s in seeds)
        lines.append(f"{m},median,{ap_med!r},{cl_med!r}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.csv").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    scene_cfg = SceneConfig(num_classes=3, feature_dim=8, num_proposals=24, clutter_rate=0.25)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(99,)))
    scene = generate_scene(scene_cfg, rng, scene_id=0)
    model = ToyModel.initialize(3, 8, num_branches=2, seed=args.seed, init_scale=0.5)
    schedule = ScheduleState(t_n=150, t_0=100, t_1=200)
    err = finite_diff_check(model, scene, schedule, method="opis", seed=args.seed)
    print(f"max relative gradient error: {err:.3e}")
    if err <= 1e-5:
        return EXIT_OK
    print("gradient check FAILED (tolerance 1e-5)", file=sys.stderr)
    return EXIT_NUMERIC


def cmd_sample_demo(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    t_0, t_1 = config.t_0, config.total_iterations
    iteration = args.iteration if args.iteration is not None else t_0
    if not t_0 <= iteration < t_1:
        raise ConfigError(f"--iteration must lie in the fine-tuning range [{t_0}, {t_1}), got {iteration}")
    schedule = config.schedule(iteration)

    dataset = generate_dataset(config.scene, config.seed, 1)
    scene = dataset[0]
    if args.model is not None:
        model = ToyModel.from_json(Path(args.model).read_text())
    else:
        model = ToyModel.initialize(
            config.scene.num_classes, config.scene.feature_dim, config.refinements, config.seed, config.init_scale
        )
    scores = forward(model, scene)
    print(f"scene {scene.scene_id}, iteration {iteration}: T={schedule.t_progress:.4f} "
          f"mu={schedule.mu:.4f} I_t={schedule.neglect:.4f}")
    for branch in range(1, model.num_branches + 1):
        phi_prev = scores.phi_prev(branch)
        centers = select_cluster_centers(phi_prev, scene.image_label)
        targets, assignment = assign_labels(centers, scene.proposals, phi_prev, schedule.lambda_ig, schedule.lambda_ng)
        print(f"branch {branch}:")
        for c in sorted(centers):
            pos_c = assignment.positives[c]
            neg_c = assignment.negatives[c]
            if pos_c.size == 0:
                print(f"  class {c}: center absorbed by a lower class, skipped")
                continue
            if neg_c.size == 0:
                kept = "center only" if float(phi_prev[c - 1, pos_c].sum()) < schedule.neglect else "all positives"
                print(f"  class {c}: n_pos={pos_c.size} n_neg=0 -> neglect rule keeps {kept}")
                continue
            rng = SamplerRng(config.seed, scene.scene_id, iteration, branch, c).generator()
            detail = sample_negatives_detail(
                neg_c, targets.max_iou[neg_c], int(pos_c.size), schedule.mu,
                schedule.lambda_ig, schedule.lambda_ng, rng, schedule.n_bins,
            )
            print(f"  class {c}: n_pos={pos_c.size} n_neg={neg_c.size} target={detail.target}")
            width = (schedule.lambda_ng - schedule.lambda_ig) / schedule.n_bins
            for j, (members, picked) in enumerate(zip(detail.bin_members, detail.stage1)):
                lo = schedule.lambda_ig + j * width
                print(f"    bin [{lo:.3f},{lo + width:.3f}): {members.size} negatives, stage-1 selected {picked.size}")
            print(f"    stage-2 top-up: {detail.stage2.size}")
            print(f"    selected |N'| = {detail.selected.size}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opis", description="Instance-balanced weak-detection experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model and write its logs")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--method", choices=METHODS)
    p_train.add_argument("--iterations-override", type=int, dest="iterations_override")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved model on a regenerated scene set")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--dataset-seed", type=int, dest="dataset_seed")
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare", help="run a method x seed grid and tabulate metrics")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--methods", default=",".join(METHODS))
    p_cmp.add_argument("--seeds", default="0,1,2,3,4")
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--iterations-override", type=int, dest="iterations_override")
    p_cmp.set_defaults(func=cmd_compare)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_demo = sub.add_parser("sample-demo", help="trace the negative sampler on one seeded scene")
    p_demo.add_argument("--config", required=True)
    p_demo.add_argument("--iteration", type=int)
    p_demo.add_argument("--model")
    p_demo.add_argument("--seed", type=int)
    p_demo.set_defaults(func=cmd_sample_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"numerical failure at iteration {exc.iteration}: {exc} {exc.snapshot}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())
