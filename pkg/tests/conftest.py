"""Shared test helpers: model builders and the central-finite-difference
gradient oracle used across the gradient checks."""
from __future__ import annotations

import numpy as np

from fedhe_sim.nn import Gradients, Model, ModelSpec, init_model
from fedhe_sim.seeds import derive_rng


def make_model(widths, activation="relu", dropout=0.0, seed=42, index=0) -> Model:
    spec = ModelSpec(tuple(widths), activation=activation, dropout_rate=dropout)
    return init_model(spec, derive_rng(seed, "init", index))


def fd_param_grads(model: Model, loss_fn, h: float = 1e-6) -> Gradients:
    """Central finite differences of a scalar loss over every parameter.
    loss_fn() must recompute the loss from the model's current parameters."""
    gw, gb = [], []
    for params, out in ((model.weights, gw), (model.biases, gb)):
        for p in params:
            g = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + h
                up = loss_fn()
                p[idx] = orig - h
                down = loss_fn()
                p[idx] = orig
                g[idx] = (up - down) / (2.0 * h)
            out.append(g)
    return Gradients(weights=gw, biases=gb)


def max_rel_err(analytic: Gradients, numeric: Gradients, floor: float = 1e-8) -> float:
    """Worst relative disagreement; entries below the floor on both sides are
    compared absolutely against the floor."""
    worst = 0.0
    for a_list, n_list in (
        (analytic.weights, numeric.weights),
        (analytic.biases, numeric.biases),
    ):
        for a, n in zip(a_list, n_list):
            scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float((np.abs(a - n) / scale).max()))
    return worst
