"""Command-line surface: scene generation, click caching, training,
evaluation, inference, the HTTP service, and gradient checking."""

from __future__ import annotations

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np

from . import io as pio
from .evaluation import EvalProtocol, evaluate_dataset
from .losses import LossWeights
from .model import ModelConfig, init_model, load_checkpoint
from .pipeline import segment
from .sampling import ClickSet, SamplerConfig
from .synthdata import SceneSpec, generate_scene
from .training import TrainConfig, grad_check, precache_clicks, train


def _scene_spec(args) -> SceneSpec:
    return SceneSpec(
        n_instances_min=args.instances_min,
        n_instances_max=args.instances_max,
        points_per_instance_min=args.points_min,
        points_per_instance_max=args.points_max,
        seed=args.seed,
    )


def _load_scenes(scene_dir: Path):
    scenes = []
    for path in sorted(Path(scene_dir).glob("*.json")):
        cloud, instance_ids, class_ids = pio.load_scene(path)
        scenes.append((cloud, instance_ids, class_ids))
    if not scenes:
        raise SystemExit(f"no scene files found in {scene_dir}")
    return scenes


def cmd_gen_scenes(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = _scene_spec(args)
        spec.seed = args.seed + i
        cloud, instance_ids, class_ids = generate_scene(spec)
        pio.save_scene(out / f"{cloud.id}.json", cloud, instance_ids, class_ids)
    print(f"wrote {args.count} scenes to {out}")


def cmd_cache_clicks(args):
    scenes = _load_scenes(args.scenes)
    cache = precache_clicks(scenes, SamplerConfig(seed=args.seed, strategy=args.strategy))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        pickle.dump(cache, f)
    total = sum(c.n_clicks for c in cache.values())
    print(f"cached {total} candidate clicks for {len(cache)} scenes -> {out}")


def cmd_train(args):
    scenes = _load_scenes(args.scenes)
    if args.cache:
        with open(args.cache, "rb") as f:
            cache = pickle.load(f)
    else:
        cache = precache_clicks(scenes, SamplerConfig(seed=args.seed))
    cfg = TrainConfig(
        steps=args.steps,
        lr=args.lr,
        seed=args.seed,
        out_dir=args.out,
        sampler=SamplerConfig(seed=args.seed),
        loss_weights=LossWeights(bce=args.w_bce, dice=args.w_dice, ce=args.w_ce),
    )
    model_cfg = ModelConfig(dtype=args.dtype)
    result = train(cfg, scenes, cache, model_config=model_cfg)
    print(
        f"trained {args.steps} steps; final loss {result.curve[-1]['total']:.4f}, "
        f"best {result.best_loss:.4f} at step {result.best_step}; "
        f"checkpoints in {args.out}"
    )


def cmd_eval(args):
    scenes = _load_scenes(args.scenes)
    model = load_checkpoint(args.model)
    protocol = EvalProtocol(
        click_schedule=tuple(int(n) for n in args.clicks.split(",")),
        seed=args.seed,
    )
    report = evaluate_dataset(
        lambda scene, clicks: segment(scene, clicks, model),
        scenes,
        protocol,
        with_noc=not args.no_noc,
    )
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
        series = report.plot_series()
        plot_path = Path(args.out).with_suffix(".plot.csv")
        plot_path.write_text(
            "clicks,miou\n" + "\n".join(f"{n},{v}" for n, v in series) + "\n"
        )
        print(f"report -> {args.out}; plot data -> {plot_path}")


def cmd_infer(args):
    cloud, _, _ = pio.load_scene(args.scene)
    clicks = pio.load_clicks(args.clicks)
    model = load_checkpoint(args.model)
    result = segment(cloud, clicks, model)
    pio.save_result(args.out, result)
    n_inst = len(result.groups)
    n_bg = int(np.count_nonzero(result.point_instance < 0))
    print(f"segmented {cloud.n_points} points into {n_inst} instances "
          f"({n_bg} background) -> {args.out}")


def cmd_serve(args):
    from .service import serve

    serve(host=args.host, port=args.port, model_dir=args.models, scene_dir=args.scenes)


def cmd_gradcheck(args):
    spec = SceneSpec(
        n_instances_min=2, n_instances_max=3,
        points_per_instance_min=16, points_per_instance_max=24,
        floor_points=12, seed=args.seed,
    )
    cloud, instance_ids, class_ids = generate_scene(spec)
    keep = slice(0, min(cloud.n_points, args.points))
    cloud_small = type(cloud)(positions=cloud.positions[keep], id=cloud.id)
    instance_ids = instance_ids[keep]
    cfg = ModelConfig(
        level_dims=(12, 18), voxel_sizes=(0.12, 0.3), d_model=24, ffn_hidden=32,
        pe_bands=3, n_classes=len(np.unique(class_ids)) + 1,
        n_prototypes=len(np.unique(class_ids)) + 1,
        stages=2, dtype="float64",
    )
    model = init_model(cfg, seed=args.seed)
    from .evaluation import initial_clicks

    clicks, _ = initial_clicks(cloud_small, instance_ids, 2, seed=args.seed)
    report = grad_check(model, cloud_small, clicks, instance_ids, class_ids,
                        tolerance=args.tolerance)
    for name, err in report.groups:
        flag = "ok " if err <= report.tolerance else "FAIL"
        print(f"{flag} {name:<28} rel_err={err:.3e}")
    print(f"margins: {report.margins}")
    print("PASS" if report.passed else "FAIL")
    if not report.passed:
        sys.exit(1)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pointclick",
        description="Click-driven multi-object 3D point cloud segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate synthetic scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances-min", type=int, default=4)
    p.add_argument("--instances-max", type=int, default=7)
    p.add_argument("--points-min", type=int, default=150)
    p.add_argument("--points-max", type=int, default=300)
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("cache-clicks", help="pre-cache per-scene click candidates")
    p.add_argument("--scenes", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="cache file (.pkl)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default="fps", choices=["fps", "random", "voxel"])
    p.set_defaults(fn=cmd_cache_clicks)

    p = sub.add_parser("train", help="train a model on generated scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--cache", default=None, help="click cache from cache-clicks")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--w-bce", type=float, default=1.0)
    p.add_argument("--w-dice", type=float, default=1.0)
    p.add_argument("--w-ce", type=float, default=1.0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--model", required=True, help="checkpoint .npz")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--clicks", default="1,3,5", help="comma-separated click schedule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-noc", action="store_true", help="skip NoC protocol")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="segment one scene with a click file")
    p.add_argument("--scene", required=True)
    p.add_argument("--clicks", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("serve", help="run the interactive HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--models", default=None, help="model directory")
    p.add_argument("--scenes", default=None, help="scene directory")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
