"""Quadratic objective fixture with closed-form trajectories and meta-gradients.

Loss 0.5 (x - x*)^T A (x - x*) under SGD admits exact algebra:
states follow x_k = x* + (I - eta A)^k (x_0 - x*) and the exact gradient of
the final loss w.r.t. the start is (I - eta A)^K A (x_K - x*). These closed
forms are kept independent of the product code paths they verify (which use
rollouts and Hessian-vector products instead of matrix powers).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


class QuadraticObjective:
    """Drop-in objective over flat parameter vectors (view-free)."""

    def __init__(self, matrix: np.ndarray, target: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.target = np.asarray(target, dtype=np.float64).reshape(-1)
        d = self.target.shape[0]
        if self.matrix.shape != (d, d):
            raise ShapeMismatch(f"matrix {self.matrix.shape} vs target dim {d}")

    def loss(self, x: np.ndarray) -> float:
        r = np.asarray(x, dtype=np.float64).reshape(-1) - self.target
        return float(0.5 * r @ self.matrix @ r)

    def grad(self, x: np.ndarray) -> np.ndarray:
        r = np.asarray(x, dtype=np.float64).reshape(-1) - self.target
        return self.matrix @ r

    # objective protocol used by run_refinement (scene-based)
    def step_loss_and_grad(self, scene, step: int):
        from .scene import flatten
        flat = flatten(scene).data
        return self.loss(flat), self.grad(flat)

    def full_loss_and_grad(self, scene):
        return self.step_loss_and_grad(scene, 0)


def random_quadratic(rng: np.random.Generator, dim: int, lam_max: float = 1.0):
    """Random PSD matrix with largest eigenvalue exactly lam_max, plus a target."""
    q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (dim, dim)))
    eigs = rng.uniform(0.05, 1.0, dim)
    eigs = eigs / eigs.max() * lam_max
    matrix = q @ np.diag(eigs) @ q.T
    matrix = 0.5 * (matrix + matrix.T)
    target = rng.normal(0.0, 1.0, dim)
    return matrix, target


def closed_form_state(matrix, target, x0, eta: float, k: int) -> np.ndarray:
    """x_k = x* + (I - eta A)^k (x_0 - x*)."""
    d = len(target)
    step = np.eye(d) - eta * matrix
    return target + np.linalg.matrix_power(step, k) @ (np.asarray(x0) - target)


def closed_form_meta_gradient(matrix, target, x0, eta: float, k: int) -> np.ndarray:
    """Exact d loss(x_K) / d x_0 = (I - eta A)^K A (x_K - x*)."""
    d = len(target)
    step = np.eye(d) - eta * matrix
    x_k = closed_form_state(matrix, target, x0, eta, k)
    return np.linalg.matrix_power(step, k) @ (matrix @ (x_k - target))
