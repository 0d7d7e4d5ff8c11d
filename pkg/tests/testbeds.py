"""Handcrafted models with known structure for attribution oracles."""

from __future__ import annotations

import numpy as np

from circuitlab.config import ModelConfig
from circuitlab.model import Model, build_model
from circuitlab.tasks import TaskExample, TaskSpec


def quadratic_testbed(seed: int = 0, n_examples: int = 8) -> tuple[Model, TaskSpec]:
    """One layer, one head, single-position inputs, squared logit-difference metric.

    Components talk through disjoint residual subspaces: the embedding writes
    dims 0-1, the head reads them through its value channel and writes dims
    2-3, the MLP reads 2-3 and writes 4-5, and the unembedding reads 4-5.  So
    the metric is a quadratic function of the MLP output and a smooth
    nonlinear function of everything upstream.
    """
    V, d = 6, 8
    cfg = ModelConfig(1, 1, d, 2, 6, V, 1, seed=seed)
    p = build_model(cfg).zeros_like()
    rng = np.random.default_rng(seed)
    p.W_E[:, 0:2] = rng.normal(0, 1.0, (V, 2))
    p.W_Q[0, 0] = rng.normal(0, 1.0, (d, 2))
    p.W_K[0, 0] = rng.normal(0, 1.0, (d, 2))
    p.W_V[0, 0, 0:2] = rng.normal(0, 1.0, (2, 2))
    p.W_O[0, 0, :, 2:4] = rng.normal(0, 1.0, (2, 2))
    p.W_in[0, 2:4] = rng.normal(0, 1.0, (2, 6))
    p.b_in[0] = rng.normal(0, 0.5, 6)
    p.W_out[0, :, 4:6] = rng.normal(0, 1.0, (6, 2))
    p.W_U[4:6] = rng.normal(0, 1.0, (2, V))
    examples = []
    for _ in range(n_examples):
        a, b = rng.choice(V, size=2, replace=False)
        pos, neg = rng.choice(V, size=2, replace=False)
        examples.append(TaskExample((int(a),), (int(b),), (int(pos),), (int(neg),)))
    task = TaskSpec("quadratic", "functional", tuple(examples), metric_mode="logit_diff_squared",
                    vocab=tuple(f"t{i}" for i in range(V)))
    return Model(cfg, p), task


def zero_layer_model(seed: int = 0, V: int = 7, d: int = 5, T: int = 3) -> Model:
    cfg = ModelConfig(0, 1, d, 2, 2, V, T, seed=seed)
    p = build_model(cfg)
    rng = np.random.default_rng(seed)
    p.W_E[...] = rng.normal(size=p.W_E.shape)
    p.W_pos[...] = rng.normal(size=p.W_pos.shape)
    p.W_U[...] = rng.normal(size=p.W_U.shape)
    return Model(cfg, p)
