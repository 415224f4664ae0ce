"""Experiment orchestration: training runs, held-out evaluation, and sweeps.

Reproducibility contract: everything is driven by `TrainConfig.seed` through
named RNG streams (scene order, horizon sampling, predictor init are
independent, so e.g. changing the horizon range never perturbs scene order).
Identical config + seed reproduces every CSV byte for byte.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, config_hash, write_snapshot
from .errors import NonFiniteLoss
from .inner_opt import AdamState, PhotometricObjective, adam_step
from .outer_loop import outer_iteration
from .photometric import loss_LA, psnr, ssim
from .predictor import PredictorParams, SceneInput, init_params, predict, save_params
from .renderer import render_forward
from .scene import FlatParams, flatten, unflatten
from .synthetic import SyntheticScene

_STREAMS = ("scene_gen", "shuffle", "horizon", "predictor_init")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(seq) for name, seq in zip(_STREAMS, children)}


def context_view_indices(scene: SyntheticScene, n_context: int) -> list[int]:
    """Evenly spaced picks among the train views."""
    train = scene.train_indices
    n = min(n_context, len(train))
    picks = np.unique(np.round(np.linspace(0, len(train) - 1, n)).astype(int))
    return [train[i] for i in picks]


def scene_input_for(scene: SyntheticScene, cfg: TrainConfig) -> SceneInput:
    idx = context_view_indices(scene, cfg.context_views)
    return SceneInput(views=[(scene.cameras[i], scene.views[i]) for i in idx],
                      seed_depths=[scene.seed_depths[i] for i in idx])


def training_objective(scene: SyntheticScene, cfg: TrainConfig) -> PhotometricObjective:
    return PhotometricObjective(scene.train_views(), cfg.w_ssim,
                                np.full(3, cfg.background_gray))


def predicted_slots(cfg: TrainConfig) -> int:
    per_view = int(np.ceil(cfg.image_size / cfg.stride)) ** 2
    return cfg.context_views * per_view


def fresh_params(cfg: TrainConfig, rng: np.random.Generator) -> PredictorParams:
    return init_params(rng, mode=cfg.predictor_mode, hidden_width=cfg.hidden_width,
                       sh_degree=cfg.sh_degree, n_slots=predicted_slots(cfg),
                       gains=cfg.gains())


def train(cfg: TrainConfig, scenes: list[SyntheticScene], out_dir=None):
    """Outer-loop training over a shuffled scene stream.

    Returns (params, records); each record is one JSON-ready dict per outer
    iteration. With out_dir set, writes the resolved config, a JSON-lines log,
    and periodic + final checkpoints.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    streams = rng_streams(cfg.seed)
    params = fresh_params(cfg, streams["predictor_init"])
    outer_state = AdamState.uniform(params.to_vector().size, cfg.outer_lr)
    chash = config_hash(cfg)

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_snapshot(os.path.join(out_dir, "config.resolved"), cfg)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")

    records = []
    order: list[int] = []
    try:
        for it in range(cfg.outer_iterations):
            if not order:
                order = list(streams["shuffle"].permutation(len(scenes)))
            scene = scenes[order.pop(0)]
            record = {"iter": it, "scene_id": scene.scene_id, "rule": cfg.rule,
                      "lambda": cfg.lambda_weight, "seed": cfg.seed,
                      "config_hash": chash}
            try:
                params, report, _ = outer_iteration(
                    params, scene_input_for(scene, cfg),
                    training_objective(scene, cfg), cfg, streams["horizon"],
                    outer_state)
                record.update(report.to_record())
            except NonFiniteLoss as exc:
                if cfg.strict_errors:
                    raise
                record.update({"skipped": True, "error": str(exc),
                               "error_step": exc.step})
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if (out_dir is not None and cfg.checkpoint_interval > 0
                    and (it + 1) % cfg.checkpoint_interval == 0):
                save_params(os.path.join(out_dir, f"checkpoint_{it + 1:06d}.fspp"), params)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_params(os.path.join(out_dir, "checkpoint_final.fspp"), params)
    return params, records


@dataclass
class MetricTrajectory:
    """Per-scene, per-step held-out metrics at the evaluation stride."""

    rows: list = field(default_factory=list)  # (scene_id, step, psnr, ssim, l1, dssim)

    def append(self, scene_id, step, psnr_v, ssim_v, l1_v, dssim_v):
        self.rows.append((int(scene_id), int(step), float(psnr_v), float(ssim_v),
                          float(l1_v), float(dssim_v)))

    def steps(self) -> list[int]:
        return sorted({r[1] for r in self.rows})

    def mean_at(self, step: int) -> dict:
        sel = [r for r in self.rows if r[1] == step]
        if not sel:
            raise KeyError(f"no rows at step {step}")
        arr = np.asarray([(r[2], r[3], r[4], r[5]) for r in sel])
        mean = arr.mean(axis=0)
        return {"psnr": float(mean[0]), "ssim": float(mean[1]),
                "l1": float(mean[2]), "dssim": float(mean[3])}

    def final_step(self) -> int:
        return self.steps()[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scene_id", "step", "psnr", "ssim", "l1", "dssim"])
            for row in self.rows:
                writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])


def _eval_points(steps: int, stride: int) -> list[int]:
    points = list(range(0, steps + 1, stride))
    if points[-1] != steps:
        points.append(steps)
    return points


def evaluate(params: PredictorParams, scenes: list[SyntheticScene], steps: int,
             eval_stride: int, cfg: TrainConfig) -> MetricTrajectory:
    """Predict from train views, refine on train views, score on test views.

    The step-0 row is the raw feed-forward prediction. Test images are only
    touched by the metric evaluation; the refinement objective never sees
    them (checked via the scenes' read counters).
    """
    background = np.full(3, cfg.background_gray)
    traj = MetricTrajectory()
    points = _eval_points(steps, eval_stride)
    for scene in scenes:
        objective = training_objective(scene, cfg)
        reads_before = scene.test_view_reads
        scene0 = predict(params, scene_input_for(scene, cfg), cfg.stride)
        layout = scene0.layout()
        flat = flatten(scene0).data
        state = AdamState.for_layout(layout, cfg.lr_map())

        pending = []  # (step, scene snapshot) collected during refinement
        pending.append((0, scene0))
        for step in range(1, steps + 1):
            current = unflatten(FlatParams(flat, layout))
            _, grad = objective.step_loss_and_grad(current, step)
            flat, state = adam_step(flat, grad, state)
            if step in points:
                pending.append((step, unflatten(FlatParams(flat, layout))))
        if scene.test_view_reads != reads_before:
            raise AssertionError("test views were read during refinement")

        for step, snapshot in pending:
            metrics = np.zeros(4)
            test = scene.test_views()
            for camera, target in test:
                out = render_forward(snapshot, camera, background)
                lb = loss_LA(out.image, target, cfg.w_ssim)
                metrics += (psnr(out.image, target), ssim(out.image, target),
                            lb.l1, lb.dssim)
            metrics /= len(test)
            traj.append(scene.scene_id, step, *metrics)
    return traj


def summary_rows(label, trajectory: MetricTrajectory) -> list[list]:
    rows = []
    for step in trajectory.steps():
        m = trajectory.mean_at(step)
        rows.append([label, step, repr(m["psnr"]), repr(m["ssim"]),
                     repr(m["l1"]), repr(m["dssim"])])
    return rows


def write_summary_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["value", "step", "psnr", "ssim", "l1", "dssim"])
        for row in rows:
            writer.writerow(row)


SWEEP_DEFAULTS = {
    "lambda": [0.0, 0.25, 0.5, 0.75, 1.0],
    "delta": [1, 20, 40, 80],
    "rule": ["metagrad", "reptile", "vanilla"],
}


def sweep_variants(base: TrainConfig, axis: str, values) -> list[tuple[str, TrainConfig]]:
    """(label, config) per run; the delta axis appends the displacement baseline."""
    if axis not in SWEEP_DEFAULTS:
        raise ValueError(f"sweep axis must be one of {sorted(SWEEP_DEFAULTS)}")
    values = list(values) if values else list(SWEEP_DEFAULTS[axis])
    variants = []
    if axis == "lambda":
        for v in values:
            variants.append((f"lambda={v}", base.replace(rule="metagrad",
                                                         lambda_weight=float(v))))
    elif axis == "delta":
        for v in values:
            d = int(v)
            variants.append((f"delta={d}", base.replace(
                rule="metagrad", anchor_stride=d, k_min=max(base.k_min, d))))
        variants.append(("reptile", base.replace(rule="reptile")))
    else:
        for v in values:
            variants.append((str(v), base.replace(rule=str(v))))
    return variants


def sweep(base: TrainConfig, axis: str, values, train_scenes: list[SyntheticScene],
          eval_scenes: list[SyntheticScene], out_dir):
    """Train+evaluate one run per value with fixed seeds; emit per-run and
    summary CSVs. Returns {label: MetricTrajectory}."""
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    all_rows = []
    for label, cfg in sweep_variants(base, axis, values):
        run_dir = os.path.join(out_dir, label.replace("=", "_"))
        params, _ = train(cfg, train_scenes, out_dir=run_dir)
        traj = evaluate(params, eval_scenes, cfg.eval_steps, cfg.eval_stride, cfg)
        traj.to_csv(os.path.join(run_dir, "metrics.csv"))
        results[label] = traj
        all_rows.extend(summary_rows(label, traj))
    write_summary_csv(os.path.join(out_dir, "summary.csv"), all_rows)
    return results
