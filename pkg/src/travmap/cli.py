"""Command-line pipeline entry point.

Subcommands cover the full workflow: generate a synthetic world, collect
a labeled dataset by driving routes through it, train the model, predict
costmaps, score them against ground truth, run navigation trials, and
train the ablation variants. Exit codes: 0 success, 2 configuration
error, 1 runtime error.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import evaluation as ev
from .config import (ConfigError, PipelineConfig, load_pipeline_config,
                     stage_seed, write_resolved_config)
from .costmap import CostmapPredictor, build_local_map, load_costmap, save_costmap
from .dataset import (assemble_sequences, enforce_balance, extract_patches,
                      load_dataset, save_dataset, split_dataset)
from .fourier import FourierConfig, sample_frequencies
from .model import (check_feature_compatibility, evaluate_loss, load_checkpoint,
                    save_checkpoint, save_loss_curves, train_model)
from .risk import SteadyDistribution
from .world import (SimConfig, calibration_strip_rect, generate_routes,
                    generate_world, load_terrain_spec, load_world,
                    render_local_cloud, run_calibration, save_terrain_spec,
                    save_world, simulate_traverse, stock_spec)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

_STOCK_NAMES = ("flat", "hill", "forest")


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_pipeline_config(args.config)
    return PipelineConfig()


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _untraversable(world, config):
    declared = {c for c, ok in world.class_traversable.items() if not ok}
    return declared | set(config.costmap.untraversable_classes)


def _traversable(world):
    return {c for c, ok in world.class_traversable.items() if ok}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.spec in _STOCK_NAMES:
        spec = stock_spec(args.spec, seed=args.seed)
    else:
        try:
            spec = load_terrain_spec(args.spec)
        except ValueError as exc:
            raise ConfigError(str(exc))
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    world = generate_world(spec)
    out = _ensure_dir(args.out)
    save_world(world, out)
    save_terrain_spec(spec, os.path.join(out, "spec.yaml"))
    print(f"world {world.class_map.shape[1]}x{world.class_map.shape[0]} cells "
          f"seed {spec.seed} -> {out}")
    return EXIT_OK


def cmd_collect(args) -> int:
    config = _load_config(args)
    world = load_world(args.world)
    seed = config.seed
    cal = run_calibration(world, seed=stage_seed(seed, "calibration"))
    grid_map = ev.global_grid_map(world, config.collect.points_per_cell)
    b = sample_frequencies(FourierConfig(
        m=config.model.m, sigma_b=config.model.sigma_b,
        seed=stage_seed(seed, "fourier")))
    routes = generate_routes(
        world, config.collect.routes, seed=stage_seed(seed, "routes"),
        speed_range=(config.collect.speed_min, config.collect.speed_max),
        length=config.collect.route_length,
        avoid_rect=calibration_strip_rect(world.extent),
    )
    sequences = []
    for i, route in enumerate(routes):
        traverse = simulate_traverse(world, route.waypoints, route.speed,
                                     seed=stage_seed(seed, "sim", i))
        samples = extract_patches(grid_map, traverse.odom, traverse.imu,
                                  cal, b, trajectory_id=i)
        sequences.extend(assemble_sequences(samples, config.model.seq_len))
    if config.collect.balance_ratio is not None:
        sequences = enforce_balance(sequences, config.collect.balance_ratio,
                                    seed=stage_seed(seed, "balance"))
    splits = split_dataset(sequences, config.collect.ratios,
                           seed=stage_seed(seed, "split"))
    if any(not s for s in splits):
        raise ValueError(
            "a dataset split came out empty; increase collect.routes")
    manifest = {
        "m": config.model.m,
        "sigma_b": config.model.sigma_b,
        "seed": seed,
        "b": [float(x) for x in b],
        "calibration_mu": cal.mu,
        "calibration_sigma": cal.sigma,
        "routes": len(routes),
    }
    out = _ensure_dir(args.out)
    save_dataset(out, dict(zip(("train", "val", "test"), splits)), manifest)
    write_resolved_config(config, os.path.join(out, "config_resolved.yaml"))
    counts = " ".join(f"{n}={len(s)}" for n, s in zip(("train", "val", "test"), splits))
    print(f"dataset {counts} sequences -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    splits, manifest = load_dataset(args.dataset)
    use_omega = None if not args.no_omega else False
    use_recurrent = None if not args.no_recurrent else False
    model_config = config.model.model_config(config.seed, use_omega, use_recurrent)
    params, curves = train_model(splits["train"], splits["val"], model_config)
    check_feature_compatibility(params, manifest)
    _ensure_dir(os.path.dirname(os.path.abspath(args.out)))
    save_checkpoint(params, args.out)
    base = os.path.splitext(args.out)[0]
    save_loss_curves(curves, base + "_curves.txt")
    write_resolved_config(config, base + "_config_resolved.yaml")
    val_loss = evaluate_loss(params, splits["val"])
    test_loss = evaluate_loss(params, splits["test"]) if len(splits["test"].labels) else float("nan")
    print(f"trained {len(curves)} epochs val_mse {val_loss:.6f} "
          f"test_mse {test_loss:.6f} -> {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    config = _load_config(args)
    params = load_checkpoint(args.checkpoint)
    world = load_world(args.world)
    cloud = render_local_cloud(world, (args.x, args.y, args.yaw))
    local_map = build_local_map(cloud)
    predictor = CostmapPredictor(params, _untraversable(world, config),
                                 stride=config.costmap.stride)
    costmap = predictor.predict(local_map, args.v, args.omega)
    out = _ensure_dir(args.out)
    save_costmap(costmap, out)
    write_resolved_config(config, os.path.join(out, "config_resolved.yaml"))
    mean_value = float(costmap.values[costmap.present].mean())
    print(f"costmap {costmap.height}x{costmap.width} mean value "
          f"{mean_value:.4f} -> {out}")
    return EXIT_OK


def _model_costmap(config, params, world, grid_map):
    predictor = CostmapPredictor(params, _untraversable(world, config),
                                 stride=config.costmap.stride)
    return predictor.predict(grid_map, config.costmap.inference_v,
                             config.costmap.inference_omega)


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    world = load_world(args.world)
    grid_map = ev.global_grid_map(world, config.collect.points_per_cell)
    gt = ev.binarize_ground_truth(grid_map.class_id, _traversable(world))
    rows = []
    if args.costmap:
        rows.append(("costmap", ev.costmap_metrics(load_costmap(args.costmap), gt)))
        roc_source = load_costmap(args.costmap)
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint or --costmap")
        params = load_checkpoint(args.checkpoint)
        model_cm = _model_costmap(config, params, world, grid_map)
        rows.append(("model", ev.costmap_metrics(model_cm, gt)))
        roc_source = model_cm
    rows.append(("uniform", ev.costmap_metrics(ev.uniform_costmap(grid_map), gt)))
    semantic = ev.semantic_costmap(grid_map, _traversable(world))
    rows.append(("semantic", ev.costmap_metrics(semantic, gt)))
    report = ev.costmap_report(rows)
    out = _ensure_dir(args.out)
    with open(os.path.join(out, "accuracy_report.txt"), "w") as fh:
        fh.write(report)
    labeled = gt[roc_source.present & (gt != ev.GT_ABSENT)]
    if (labeled == 0).any() and (labeled == 1).any():
        ev.save_roc(ev.roc_points(roc_source, gt), os.path.join(out, "roc.txt"))
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump({name: m for name, m in rows}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_resolved_config(config, os.path.join(out, "config_resolved.yaml"))
    print(report, end="")
    return EXIT_OK


def cmd_navigate(args) -> int:
    config = _load_config(args)
    world = load_world(args.world)
    nav = config.navigation
    params = load_checkpoint(args.checkpoint)
    grid_map = ev.global_grid_map(world, config.collect.points_per_cell)
    cal = run_calibration(world, seed=stage_seed(config.seed, "calibration"))
    maps = {
        "model": _model_costmap(config, params, world, grid_map),
        "uniform": ev.uniform_costmap(grid_map),
        "semantic": ev.semantic_costmap(grid_map, _traversable(world)),
    }
    endpoints = ev.sample_trial_endpoints(
        world, nav.trials, seed=stage_seed(config.seed, "trials"),
        min_separation=nav.min_separation, clearance=nav.clearance)
    out = _ensure_dir(args.out)
    traj_dir = _ensure_dir(os.path.join(out, "trajectories"))
    trials = {}
    for name, costmap in maps.items():
        runs = []
        for k, (start, goal) in enumerate(endpoints):
            trial = ev.run_trial(
                world, costmap, start, goal, cal, speed=nav.speed,
                seed=stage_seed(config.seed, "sim", k),
                obstacle_threshold=nav.obstacle_threshold,
                weight=nav.planner_weight)
            runs.append(trial)
            if trial.trajectory is not None:
                path = os.path.join(traj_dir, f"{name}_{k}.txt")
                with open(path, "w") as fh:
                    for x, y in trial.trajectory:
                        fh.write(f"{float(x)!r} {float(y)!r}\n")
        trials[name] = runs
    rows = []
    for name, runs in trials.items():
        metrics = ev.navigation_metrics(runs)
        metrics["rel_time"] = ev.navigation_metrics(
            trials["model"], runs)["rel_time"]
        rows.append((name, metrics))
    report = ev.navigation_report(rows)
    with open(os.path.join(out, "navigation_report.txt"), "w") as fh:
        fh.write(report)
    write_resolved_config(config, os.path.join(out, "config_resolved.yaml"))
    print(report, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    splits, manifest = load_dataset(args.dataset)
    variants = (
        ("full", None, None),
        ("no_omega", False, None),
        ("no_recurrent", None, False),
    )
    rows = []
    for name, use_omega, use_recurrent in variants:
        model_config = config.model.model_config(config.seed, use_omega, use_recurrent)
        params, curves = train_model(splits["train"], splits["val"], model_config)
        check_feature_compatibility(params, manifest)
        rows.append([name, evaluate_loss(params, splits["val"]), len(curves)])
    table = ev.ascii_table(["variant", "val_mse", "epochs"], rows)
    if args.out:
        _ensure_dir(os.path.dirname(os.path.abspath(args.out)))
        with open(args.out, "w") as fh:
            fh.write(table)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="travmap",
        description="Learned traversability costmaps in synthetic worlds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic world")
    p.add_argument("--spec", required=True,
                   help=f"stock name {_STOCK_NAMES} or a spec YAML path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("collect", help="drive routes and build a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the traversability model")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-omega", action="store_true",
                   help="drop angular velocity from the model input")
    p.add_argument("--no-recurrent", action="store_true",
                   help="mean-pool the sequence instead of the recurrent cell")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict a local costmap at a pose")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--x", type=float, required=True)
    p.add_argument("--y", type=float, required=True)
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--v", type=float, default=1.0)
    p.add_argument("--omega", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score costmaps against ground truth")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--costmap", default=None,
                   help="score a saved costmap instead of predicting")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("navigate", help="planner-in-the-loop trials")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("ablate", help="train and compare the model variants")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, FloatingPointError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
