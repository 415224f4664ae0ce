"""Outer-loop training rules for the scene predictor.

One outer iteration: predict an initial scene, take the immediate-loss
gradient through the predictor, optionally unroll a detached inner refinement,
form a first-order surrogate gradient on the initialization (anchor-mean or
displacement), push it through the predictor's VJP, blend the two branches,
and apply one outer Adam step.

No gradient ever flows out of the inner trajectory except through the
surrogate attachment: anchor gradients are plain detached arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .errors import EmptyAnchorSet, NonFiniteHvp, NonFiniteLoss, ShapeMismatch, TooLarge
from .inner_opt import AdamState, RefinementTrajectory, adam_step, run_refinement, sample_horizon
from .predictor import PredictorParams, SceneInput, predict, predict_backward
from .scene import FlatParams, GaussianScene, flatten, unflatten

ORACLE_MAX_HORIZON = 5
ORACLE_MAX_DIM = 512


def meta_loss(anchor_losses) -> float:
    """Equal-weight mean of the anchor losses; magnitude independent of count."""
    losses = list(anchor_losses)
    if not losses:
        raise EmptyAnchorSet("meta loss needs at least one anchor loss")
    return float(np.mean(np.asarray(losses, dtype=np.float64)))


def metagrad_surrogate(trajectory: RefinementTrajectory) -> np.ndarray:
    """Mean of the detached anchor gradients, in ascending anchor order.

    With a single anchor at the final step this reduces to the plain
    first-order (post-refinement) surrogate gradient.
    """
    if not trajectory.anchor_grads:
        raise EmptyAnchorSet("trajectory has no anchor gradients")
    stacked = np.stack(trajectory.anchor_grads, axis=0)
    return np.mean(stacked, axis=0)  # numpy reduces pairwise: stable and deterministic


def reptile_surrogate(initial, final) -> np.ndarray:
    """Displacement surrogate: initial minus refined parameters."""
    a = initial.data if isinstance(initial, FlatParams) else np.asarray(initial, dtype=np.float64)
    b = final.data if isinstance(final, FlatParams) else np.asarray(final, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"layouts differ: {a.shape} vs {b.shape}")
    return a - b


class SceneTask:
    """Adapter exposing a photometric objective as loss/grad over flat vectors."""

    def __init__(self, objective, layout):
        self.objective = objective
        self.layout = layout

    def loss(self, x: np.ndarray) -> float:
        val, _ = self.objective.full_loss_and_grad(unflatten(FlatParams(x, self.layout)))
        return val

    def grad(self, x: np.ndarray) -> np.ndarray:
        _, g = self.objective.full_loss_and_grad(unflatten(FlatParams(x, self.layout)))
        return g


def _hvp(task, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product by central differences of the task gradient."""
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(v)
    eps = 1e-4 * (1.0 + float(np.abs(x).max()))
    unit = v / nv
    hv = (task.grad(x + eps * unit) - task.grad(x - eps * unit)) / (2.0 * eps) * nv
    if not np.all(np.isfinite(hv)):
        raise NonFiniteHvp("non-finite Hessian-vector product")
    return hv


def second_order_oracle(start, task, eta: float, horizon: int) -> np.ndarray:
    """Exact (to FD-HVP accuracy) gradient of the final loss w.r.t. the start.

    Rolls out `horizon` SGD steps, then applies the transposed step Jacobians
    (I - eta * Hessian) right-to-left as vector products. Only usable on tiny
    instances; this is a test oracle, not a training mode.
    """
    x = start.data.copy() if isinstance(start, FlatParams) else np.asarray(start, dtype=np.float64).copy()
    if horizon < 0 or horizon > ORACLE_MAX_HORIZON:
        raise TooLarge(f"oracle horizon must be in [0, {ORACLE_MAX_HORIZON}], got {horizon}")
    if x.size > ORACLE_MAX_DIM:
        raise TooLarge(f"oracle dimension {x.size} > {ORACLE_MAX_DIM}")

    states = [x.copy()]
    for _ in range(horizon):
        g = task.grad(states[-1])
        states.append(states[-1] - eta * g)
    v = task.grad(states[-1])
    if not np.all(np.isfinite(v)):
        raise NonFiniteLoss("non-finite gradient at the unrolled endpoint")
    for k in range(horizon - 1, -1, -1):
        v = v - eta * _hvp(task, states[k], v)
    return v


@dataclass
class OuterStepReport:
    """One outer iteration's bookkeeping."""

    loss_initial: float            # multi-view photometric loss of the prediction
    meta_loss: float | None        # mean anchor loss (None without anchors)
    horizon: int | None
    n_anchor: int
    grad_norms: dict
    skipped: bool = False

    def to_record(self) -> dict:
        return {
            "L_0": self.loss_initial,
            "L_meta": self.meta_loss,
            "K_rand": self.horizon,
            "N_anchor": self.n_anchor,
            "grad_norm_immediate": self.grad_norms.get("immediate"),
            "grad_norm_meta": self.grad_norms.get("meta"),
            "grad_norm_combined": self.grad_norms.get("combined"),
            "skipped": self.skipped,
        }


@dataclass
class OuterStepDetails:
    initial_scene: GaussianScene
    g_immediate: np.ndarray
    g_meta: np.ndarray | None
    surrogate: np.ndarray | None
    trajectory: RefinementTrajectory | None
    combined: np.ndarray
    report: OuterStepReport


def _norm(vec) -> float:
    return float(np.linalg.norm(vec))


def outer_step_components(params: PredictorParams, scene_input: SceneInput,
                          objective, cfg: TrainConfig,
                          horizon_rng: np.random.Generator) -> OuterStepDetails:
    """Everything in one outer iteration up to (but not including) the Adam step."""
    initial = predict(params, scene_input, cfg.stride)
    loss0, grad0 = objective.full_loss_and_grad(initial)
    if not np.isfinite(loss0):
        raise NonFiniteLoss("non-finite loss on the predicted scene", step=0)
    g_imm = predict_backward(params, scene_input, cfg.stride, grad0)

    pure_supervised = cfg.rule == "vanilla" or (
        cfg.lambda_weight == 1.0 and cfg.skip_inner_when_supervised)

    g_meta = None
    surrogate = None
    trajectory = None
    l_meta = None
    horizon = None

    if not pure_supervised:
        horizon = sample_horizon(horizon_rng, cfg.k_min, cfg.k_max, cfg.anchor_stride)
        trajectory = run_refinement(
            initial, objective, horizon, cfg.anchor_stride,
            lr_map=cfg.lr_map(), optimizer=cfg.inner_optimizer,
            sgd_eta=cfg.sgd_eta,
            record_anchor_grads=(cfg.rule == "metagrad"))
        if cfg.rule == "metagrad":
            surrogate = metagrad_surrogate(trajectory)
            l_meta = meta_loss(trajectory.anchor_losses)
        else:  # reptile
            surrogate = reptile_surrogate(flatten(initial), flatten(trajectory.final_state))
        g_meta = predict_backward(params, scene_input, cfg.stride, surrogate)

    # exact endpoints so lambda = 1 is bit-identical to pure supervised training
    lam = cfg.lambda_weight if cfg.rule != "vanilla" else 1.0
    if g_meta is None or lam == 1.0:
        combined = g_imm.copy()
    elif lam == 0.0:
        combined = g_meta.copy()
    else:
        combined = lam * g_imm + (1.0 - lam) * g_meta

    report = OuterStepReport(
        loss_initial=float(loss0), meta_loss=l_meta, horizon=horizon,
        n_anchor=trajectory.n_anchor if trajectory is not None else 0,
        grad_norms={"immediate": _norm(g_imm),
                    "meta": _norm(g_meta) if g_meta is not None else None,
                    "combined": _norm(combined)})
    return OuterStepDetails(initial_scene=initial, g_immediate=g_imm, g_meta=g_meta,
                            surrogate=surrogate, trajectory=trajectory,
                            combined=combined, report=report)


def outer_iteration(params: PredictorParams, scene_input: SceneInput, objective,
                    cfg: TrainConfig, horizon_rng: np.random.Generator,
                    outer_state: AdamState):
    """One full outer step; returns (updated params, report, details)."""
    details = outer_step_components(params, scene_input, objective, cfg, horizon_rng)
    vec, _ = adam_step(params.to_vector(), details.combined, outer_state)
    return params.with_vector(vec), details.report, details
