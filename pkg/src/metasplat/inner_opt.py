"""Per-scene refinement: Adam/SGD over flat raw parameters, horizon sampling,
anchor capture, and the trajectory record one refinement run produces.

A refinement run always starts from a detached copy of the initial scene and
a fresh optimizer state; nothing links the trajectory back to whatever
produced the initialization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import BadRange, EmptyAnchorSet, NonFiniteLoss, ShapeMismatch
from .photometric import LossBreakdown, loss_LA
from .renderer import render_backward, render_forward
from .scene import Camera, FlatParams, GaussianScene, ImageBuffer, SceneLayout, flatten, unflatten

# Raw-space per-block step sizes. Means follow the 3DGS convention
# (1.6e-4 * scene extent, applied by the caller); the raw-scale rate is much
# larger than the 3DGS value because the softplus scale activation has a fixed
# 1e-3 gain, so raw steps must be ~1e3 bigger to move physical scales.
DEFAULT_LR_MEANS_PER_EXTENT = 1.6e-4
DEFAULT_LR_SCALES = 0.5
DEFAULT_LR_ROTATIONS = 1e-3
DEFAULT_LR_OPACITIES = 5e-2
DEFAULT_LR_SH = 2.5e-3


@dataclass
class AdamState:
    """Bias-corrected Adam moments with a per-element learning-rate vector."""

    m: np.ndarray
    v: np.ndarray
    lr: np.ndarray | float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def uniform(size: int, lr: float) -> "AdamState":
        return AdamState(m=np.zeros(size), v=np.zeros(size), lr=float(lr))

    @staticmethod
    def for_layout(layout: SceneLayout, lr_map: dict[str, float]) -> "AdamState":
        lr = np.zeros(layout.total)
        for name, (off, length) in layout.offsets().items():
            lr[off:off + length] = lr_map[name]
        return AdamState(m=np.zeros(layout.total), v=np.zeros(layout.total), lr=lr)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState):
    """One Adam update; returns new params, mutating the state in place."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeMismatch(
            f"adam shapes differ: params {params.shape}, grad {grad.shape}, "
            f"moments {state.m.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def sgd_step(params: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeMismatch(f"sgd shapes differ: {params.shape} vs {grad.shape}")
    if not eta > 0:
        raise ValueError(f"sgd step size must be positive, got {eta}")
    return params - eta * grad


def sample_horizon(rng: np.random.Generator, k_min: int, k_max: int,
                   delta: int = 1) -> int:
    """Uniform draw from the inclusive integer range [k_min, k_max]."""
    if k_min > k_max:
        raise BadRange(f"k_min {k_min} > k_max {k_max}")
    if k_min < delta:
        raise BadRange(f"k_min {k_min} < anchor stride {delta}: anchor set may be empty")
    return int(rng.integers(k_min, k_max + 1))


def anchor_set(k_rand: int, delta: int) -> list[int]:
    """Multiples of the stride inside [1, k_rand]; never empty."""
    if delta < 1:
        raise BadRange(f"anchor stride must be >= 1, got {delta}")
    if k_rand < delta:
        raise EmptyAnchorSet(f"horizon {k_rand} < stride {delta}")
    return list(range(delta, k_rand + 1, delta))


class PhotometricObjective:
    """Rendering loss over a fixed set of supervision views.

    Single steps cycle deterministically through the views (one render per
    step, splatting-training style); anchor/full evaluations average the loss
    and gradient over every view.
    """

    def __init__(self, views: list[tuple[Camera, ImageBuffer]],
                 w_ssim: float, background: np.ndarray):
        if not views:
            raise ValueError("need at least one supervision view")
        self.views = views
        self.w_ssim = float(w_ssim)
        self.background = np.asarray(background, dtype=np.float64).reshape(3)

    def _view_loss_grad(self, scene: GaussianScene, view_idx: int):
        camera, target = self.views[view_idx]
        out = render_forward(scene, camera, self.background)
        lb = loss_LA(out.image, target, self.w_ssim)
        grad = render_backward(scene, camera, self.background, out.aux, lb.grad_image)
        return lb, grad

    def step_loss_and_grad(self, scene: GaussianScene, step: int):
        """Loss/gradient for inner step `step` (1-based): one cycled view."""
        return self._view_loss_grad(scene, (step - 1) % len(self.views))

    def full_loss_and_grad(self, scene: GaussianScene):
        """Mean loss and mean gradient over all supervision views."""
        total = 0.0
        grad = np.zeros(scene.layout().total)
        for i in range(len(self.views)):
            lb, g = self._view_loss_grad(scene, i)
            total += lb.total
            grad += g
        n = len(self.views)
        return total / n, grad / n


@dataclass
class RefinementTrajectory:
    """Record of one inner-loop run: sparse anchors plus per-step losses."""

    horizon: int
    anchor_steps: list[int]
    anchor_states: list[GaussianScene]
    anchor_grads: list[np.ndarray]          # flat, one per anchor (may be empty)
    anchor_losses: list[float]              # full multi-view loss at each anchor
    per_step_loss: np.ndarray               # (horizon,) loss driving each step
    per_step_l1: np.ndarray
    per_step_dssim: np.ndarray
    final_state: GaussianScene

    @property
    def n_anchor(self) -> int:
        return len(self.anchor_steps)


def run_refinement(initial: GaussianScene, objective, horizon: int,
                   delta: int, lr_map: dict[str, float] | None = None,
                   optimizer: str = "adam", sgd_eta: float = 0.1,
                   record_anchor_grads: bool = True,
                   step_csv=None) -> RefinementTrajectory:
    """Unroll `horizon` detached optimizer steps, capturing the anchor set.

    The run starts from a copy of `initial` with fresh (zero) Adam moments.
    At each anchor step the full multi-view loss and gradient are evaluated on
    the current detached state. The primitive count never changes.
    """
    anchors = anchor_set(horizon, delta)
    scene = initial.copy()
    layout = scene.layout()
    flat = flatten(scene).data

    if optimizer == "adam":
        lr_map = dict(lr_map) if lr_map else default_lr_map()
        state = AdamState.for_layout(layout, lr_map)
    elif optimizer == "sgd":
        state = None
    else:
        raise ValueError(f"unknown inner optimizer {optimizer!r}")

    anchor_states: list[GaussianScene] = []
    anchor_grads: list[np.ndarray] = []
    anchor_losses: list[float] = []
    step_loss = np.zeros(horizon)
    step_l1 = np.zeros(horizon)
    step_dssim = np.zeros(horizon)
    next_anchor = 0

    for step in range(1, horizon + 1):
        current = unflatten(FlatParams(flat, layout))
        lb, grad = objective.step_loss_and_grad(current, step)
        total = lb.total if isinstance(lb, LossBreakdown) else float(lb)
        if not np.isfinite(total):
            raise NonFiniteLoss(f"non-finite loss at refinement step {step}", step=step)
        step_loss[step - 1] = total
        if isinstance(lb, LossBreakdown):
            step_l1[step - 1] = lb.l1
            step_dssim[step - 1] = lb.dssim

        if optimizer == "adam":
            flat, state = adam_step(flat, grad, state)
        else:
            flat = sgd_step(flat, grad, sgd_eta)

        if next_anchor < len(anchors) and step == anchors[next_anchor]:
            snapshot = unflatten(FlatParams(flat, layout))
            anchor_states.append(snapshot)
            if record_anchor_grads:
                full_loss, full_grad = objective.full_loss_and_grad(snapshot)
                if not np.isfinite(full_loss):
                    raise NonFiniteLoss(
                        f"non-finite anchor loss at step {step}", step=step)
                anchor_grads.append(full_grad)
                anchor_losses.append(float(full_loss))
            next_anchor += 1

    traj = RefinementTrajectory(
        horizon=horizon, anchor_steps=anchors, anchor_states=anchor_states,
        anchor_grads=anchor_grads, anchor_losses=anchor_losses,
        per_step_loss=step_loss, per_step_l1=step_l1, per_step_dssim=step_dssim,
        final_state=unflatten(FlatParams(flat, layout)))
    if step_csv is not None:
        dump_step_csv(step_csv, traj)
    return traj


def default_lr_map(scene_extent: float = 2.5) -> dict[str, float]:
    return {
        "means": DEFAULT_LR_MEANS_PER_EXTENT * scene_extent,
        "raw_scales": DEFAULT_LR_SCALES,
        "raw_rotations": DEFAULT_LR_ROTATIONS,
        "raw_opacities": DEFAULT_LR_OPACITIES,
        "sh_coeffs": DEFAULT_LR_SH,
    }


def dump_step_csv(path, traj: RefinementTrajectory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_l1", "loss_dssim", "loss_total"])
        for i in range(traj.horizon):
            writer.writerow([i + 1, repr(traj.per_step_l1[i]),
                             repr(traj.per_step_dssim[i]), repr(traj.per_step_loss[i])])
