"""Command-line entry points: gen-scenes, train, eval, sweep, gradcheck, selftest."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import TrainConfig, config_hash, load_config, parse_assignments, write_snapshot
from .harness import evaluate, rng_streams, sweep, train
from .predictor import load_params
from .synthetic import gen_scenes, load_synthetic, save_synthetic


def _add_config_args(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")


def _resolve_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    return parse_assignments(args.set, cfg)


def _load_scene_dir(path):
    names = sorted(n for n in os.listdir(path) if n.endswith(".fssc"))
    if not names:
        raise SystemExit(f"no .fssc scene bundles in {path}")
    return [load_synthetic(os.path.join(path, n)) for n in names]


def _cmd_gen_scenes(args) -> int:
    cfg = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    write_snapshot(os.path.join(args.out, "config.resolved"), cfg)
    rng = rng_streams(cfg.seed)["scene_gen"]
    scenes = gen_scenes(rng, args.count, cfg)
    for scene in scenes:
        save_synthetic(os.path.join(args.out, f"scene_{scene.scene_id:04d}.fssc"), scene)
    print(f"wrote {len(scenes)} scenes to {args.out} (config {config_hash(cfg)})")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    scenes = _load_scene_dir(args.scenes)
    params, records = train(cfg, scenes, out_dir=args.out)
    done = sum(1 for r in records if not r.get("skipped"))
    print(f"trained {done}/{len(records)} iterations -> {args.out} "
          f"(config {config_hash(cfg)})")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    scenes = _load_scene_dir(args.scenes)
    params = load_params(args.checkpoint)
    traj = evaluate(params, scenes, cfg.eval_steps, cfg.eval_stride, cfg)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    traj.to_csv(args.out)
    final = traj.mean_at(traj.final_step())
    print(f"evaluated {len(scenes)} scenes over {cfg.eval_steps} steps -> {args.out}")
    print(json.dumps({"final_step": traj.final_step(), **final}, sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    train_scenes = _load_scene_dir(args.scenes)
    eval_scenes = _load_scene_dir(args.eval_scenes) if args.eval_scenes else train_scenes
    values = args.values.split(",") if args.values else None
    results = sweep(cfg, args.axis, values, train_scenes, eval_scenes, args.out)
    print(f"swept {args.axis} over {len(results)} runs -> {args.out}/summary.csv")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(seed=args.seed, renderer_scenes=args.scenes)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} finite-difference suites passed")
    return 1 if failed else 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(seed=args.seed)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metasplat",
        description="Meta-learned initializations for Gaussian-splat refinement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate synthetic scene bundles")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None,
                   help="number of scenes (default: config train_scenes)")
    p.set_defaults(fn=_cmd_gen_scenes)

    p = sub.add_parser("train", help="train a predictor on scene bundles")
    _add_config_args(p)
    p.add_argument("--scenes", required=True, help="directory of .fssc bundles")
    p.add_argument("--out", required=True, help="run directory (log, checkpoints)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out views")
    _add_config_args(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="train+eval across one config axis")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=["lambda", "delta", "rule"])
    p.add_argument("--values", help="comma-separated values (default per axis)")
    p.add_argument("--scenes", required=True, help="training scene bundles")
    p.add_argument("--eval-scenes", help="evaluation bundles (default: training set)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="run every finite-difference suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=20, help="random renderer scenes")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("selftest", help="closed-form and oracle consistency suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_selftest)

    args = parser.parse_args(argv)
    if args.command == "gen-scenes" and args.count is None:
        args.count = _resolve_config(args).train_scenes
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
