"""Closed-form consistency suites: quadratic trajectories, oracle agreement,
anchor-set arithmetic, and surrogate identities. Used by the `selftest` CLI
command; the same checks back the acceptance tests."""

from __future__ import annotations

import numpy as np

from .gradcheck import random_scene
from .inner_opt import anchor_set, run_refinement
from .outer_loop import metagrad_surrogate, reptile_surrogate, second_order_oracle
from .quadratic import (
    QuadraticObjective,
    closed_form_meta_gradient,
    closed_form_state,
    random_quadratic,
)
from .scene import flatten


def check_anchor_arithmetic(max_delta=100, max_k=1000):
    """|anchor_set(K, d)| == floor(K / d) over the whole grid."""
    for delta in range(1, max_delta + 1):
        for k in range(delta, max_k + 1, 7):  # step 7 covers all residues mod delta
            got = anchor_set(k, delta)
            if len(got) != k // delta:
                return False, f"anchor_set({k}, {delta}) size {len(got)} != {k // delta}"
    if anchor_set(200, 40) != [40, 80, 120, 160, 200]:
        return False, "anchor_set(200, 40) wrong"
    return True, "anchor-set arithmetic"


def check_quadratic_trajectory(rng, trials=5, tol=1e-10):
    for _ in range(trials):
        scene = random_scene(rng, int(rng.integers(1, 4)))
        flat0 = flatten(scene).data
        matrix, target = random_quadratic(rng, flat0.size)
        eta = float(rng.uniform(0.05, 0.45))
        horizon = int(rng.integers(3, 9))
        task = QuadraticObjective(matrix, target)
        traj = run_refinement(scene, task, horizon, delta=1, optimizer="sgd", sgd_eta=eta)
        for step, state in zip(traj.anchor_steps, traj.anchor_states):
            want = closed_form_state(matrix, target, flat0, eta, step)
            if np.abs(flatten(state).data - want).max() > tol:
                return False, f"trajectory differs from closed form at step {step}"
    return True, "quadratic SGD trajectory matches closed form"


def check_oracle(rng, trials=10, dim_max=64, tol=1e-6):
    for _ in range(trials):
        dim = int(rng.integers(4, dim_max + 1))
        matrix, target = random_quadratic(rng, dim)
        eta = float(rng.uniform(0.05, 0.45))  # eta * lam_max < 0.5
        horizon = int(rng.integers(1, 4))
        x0 = rng.normal(0.0, 1.0, dim)
        task = QuadraticObjective(matrix, target)
        got = second_order_oracle(x0, task, eta, horizon)
        want = closed_form_meta_gradient(matrix, target, x0, eta, horizon)
        rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-300)
        if rel > tol:
            return False, f"oracle rel err {rel:.2e} > {tol}"
    return True, "second-order oracle matches closed-form algebra"


def check_single_anchor_surrogate(rng, trials=10, tol=1e-10):
    for _ in range(trials):
        scene = random_scene(rng, int(rng.integers(1, 3)))
        flat0 = flatten(scene).data
        matrix, target = random_quadratic(rng, flat0.size)
        eta = float(rng.uniform(0.05, 0.45))
        horizon = int(rng.integers(1, 4))
        task = QuadraticObjective(matrix, target)
        traj = run_refinement(scene, task, horizon, delta=horizon,
                              optimizer="sgd", sgd_eta=eta)
        got = metagrad_surrogate(traj)
        want = matrix @ (flatten(traj.final_state).data - target)
        if np.abs(got - want).max() > tol:
            return False, "single-anchor surrogate != endpoint gradient"
    return True, "single-anchor surrogate equals the endpoint gradient"


def check_reptile_closed_form(rng, trials=5, tol=1e-10):
    for _ in range(trials):
        scene = random_scene(rng, int(rng.integers(1, 3)))
        flat0 = flatten(scene).data
        dim = flat0.size
        matrix, target = random_quadratic(rng, dim)
        eta = float(rng.uniform(0.05, 0.45))
        horizon = int(rng.integers(1, 6))
        task = QuadraticObjective(matrix, target)
        traj = run_refinement(scene, task, horizon, delta=1, optimizer="sgd",
                              sgd_eta=eta, record_anchor_grads=False)
        got = reptile_surrogate(flat0, flatten(traj.final_state).data)
        step = np.eye(dim) - eta * matrix
        want = (np.eye(dim) - np.linalg.matrix_power(step, horizon)) @ (flat0 - target)
        if np.abs(got - want).max() > tol:
            return False, "displacement surrogate differs from closed form"
    return True, "displacement surrogate matches closed form"


def check_oracle_alignment(rng, trials=5, threshold=0.9):
    """First-order surrogate vs exact meta-gradient on mild quadratics."""
    worst = 1.0
    for _ in range(trials):
        dim = int(rng.integers(8, 33))
        matrix, target = random_quadratic(rng, dim)
        eta = float(rng.uniform(0.05, 0.15))
        horizon = 3
        x0 = rng.normal(0.0, 1.0, dim)
        task = QuadraticObjective(matrix, target)
        exact = second_order_oracle(x0, task, eta, horizon)
        x_k = closed_form_state(matrix, target, x0, eta, horizon)
        fomaml = matrix @ (x_k - target)
        cos = float(fomaml @ exact / (np.linalg.norm(fomaml) * np.linalg.norm(exact)))
        worst = min(worst, cos)
    ok = worst > threshold
    return ok, f"first-order/exact alignment on quadratics: worst cosine {worst:.4f}"


def run_selftest(seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    checks = [
        check_anchor_arithmetic(),
        check_quadratic_trajectory(rng),
        check_oracle(rng),
        check_single_anchor_surrogate(rng),
        check_reptile_closed_form(rng),
        check_oracle_alignment(rng),
    ]
    failed = 0
    for ok, msg in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {msg}")
        failed += 0 if ok else 1
    return 1 if failed else 0
