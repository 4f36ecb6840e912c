"""Randomized finite-difference certification of the analytic gradients."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .collapse_lab import PLACEMENTS, encode, evaluate_objective, init_params
from .dispersion import HINGE_SUBGRADIENT_NOTE, DispersionSpec, dispersive_grad, dispersive_loss
from .numeric_core import fd_gradient, max_rel_error, seeded_normal

BATCH_SIZES = (2, 4, 8, 16)
DIMS = (1, 2, 8, 32)
PASS_THRESHOLD = 1e-5


def _summarize(kind: str, spec: DispersionSpec, results: list[dict], seed: int) -> dict:
    worst = max(results, key=lambda r: r["rel_err"])
    failures = [r for r in results if not r["rel_err"] < PASS_THRESHOLD]
    report = {
        "target": kind,
        "variant": spec.variant,
        "tau": spec.tau,
        "epsilon": spec.epsilon,
        "margin": spec.margin,
        "hinge_form": spec.hinge_form,
        "include_self_pairs": spec.include_self_pairs,
        "seed": seed,
        "trials": len(results),
        "threshold": PASS_THRESHOLD,
        "max_rel_err": worst["rel_err"],
        "worst_trial": worst,
        "failures": failures,
        "pass": not failures,
    }
    if spec.variant == "hinge":
        report["subgradient_convention"] = HINGE_SUBGRADIENT_NOTE
    return report


def loss_trial(spec: DispersionSpec, trial_seed: int) -> dict:
    """One random batch: shape drawn from the fixed grid, entries ~ N(0, 1/d)."""
    rng = np.random.Generator(np.random.PCG64(trial_seed))
    B = int(rng.choice(BATCH_SIZES))
    d = int(rng.choice(DIMS))
    # 1/sqrt(d) keeps squared distances O(1) so the hinge is partly active
    H = seeded_normal(B, d, trial_seed) / math.sqrt(d)
    analytic = dispersive_grad(H, spec)
    numeric = fd_gradient(lambda M: dispersive_loss(M, spec), H)
    return {"trial_seed": trial_seed, "B": B, "d": d, "rel_err": max_rel_error(analytic, numeric)}


def check_loss_gradients(spec: DispersionSpec, trials: int = 100, seed: int = 0) -> dict:
    results = [loss_trial(spec, seed + t) for t in range(trials)]
    return _summarize("loss", spec, results, seed)


def objective_trial(spec: DispersionSpec, trial_seed: int) -> dict:
    """One random toy encoder and 4-sample batch; FD over every parameter."""
    rng = np.random.Generator(np.random.PCG64(trial_seed))
    D_in, hidden, embed, K = (int(rng.integers(lo, hi)) for lo, hi in ((2, 6), (3, 7), (2, 4), (2, 4)))
    activation = ("telu", "relu")[trial_seed % 2]
    placement = PLACEMENTS[(trial_seed // 2) % 2]
    lam = float(rng.uniform(0.1, 1.0))
    params = init_params(D_in, hidden, embed, K, activation, seed=trial_seed)
    # positive-leaning biases so few units start at the ReLU kink
    params.b1[...] = 0.1 * rng.standard_normal(hidden) + 0.5
    params.b2[...] = 0.1 * rng.standard_normal(embed) + 0.5
    params.head_b[...] = 0.1 * rng.standard_normal(K)
    for _ in range(1000):
        X = rng.standard_normal((4, D_in))
        H1, H2 = encode(params, X)
        placed = H1 if placement == "early" else H2
        # cosine dissimilarity is undefined on an all-zero (dead ReLU) row
        if np.min(np.linalg.norm(placed, axis=1)) > 1e-3:
            break
    y = rng.integers(0, K, size=4)

    def total(theta):
        return evaluate_objective(params.with_flat(theta), X, y, lam, spec, placement).total

    analytic = evaluate_objective(params, X, y, lam, spec, placement).grads.flatten()
    numeric = fd_gradient(total, params.flatten())
    return {
        "trial_seed": trial_seed, "B": 4, "D_in": D_in, "hidden": hidden, "d": embed, "K": K,
        "activation": activation, "placement": placement, "lambda": lam,
        "rel_err": max_rel_error(analytic, numeric),
    }


def check_objective_gradients(spec: DispersionSpec, trials: int = 100, seed: int = 0) -> dict:
    results = [objective_trial(spec, seed + t) for t in range(trials)]
    return _summarize("objective", spec, results, seed)


def default_specs() -> list[DispersionSpec]:
    """One spec per variant plus the distance-form hinge."""
    base = DispersionSpec(tau=0.8)
    specs = [replace(base, variant=v) for v in ("infonce_l2", "infonce_cos", "hinge", "covariance")]
    specs.append(replace(base, variant="hinge", hinge_form="distance"))
    return specs
