from __future__ import annotations

import numpy as np
import pytest

from circuitlab.config import ModelConfig
from circuitlab.model import Model, MetricBatch, build_model
from circuitlab.tasks import TaskExample, TaskSpec


def random_model(L=2, A=2, d=16, dh=4, dm=24, V=11, T=6, seed=0, scale=0.4,
                 normalization="none", qkv_split=True) -> Model:
    """A model with large random weights so every component matters."""
    cfg = ModelConfig(L, A, d, dh, dm, V, T, normalization=normalization, seed=seed)
    params = build_model(cfg)
    rng = np.random.default_rng(seed + 1000)
    for _, arr in params.blocks():
        arr[...] = rng.normal(0.0, scale, arr.shape)
    return Model(cfg, params, qkv_split)


def random_task(model: Model, n=5, T=5, seed=0, mode="logit_diff", task_id="rand") -> TaskSpec:
    rng = np.random.default_rng(seed)
    V = model.config.vocab_size
    examples = []
    for _ in range(n):
        pos, neg = rng.choice(V, size=2, replace=False)
        examples.append(TaskExample(tuple(rng.integers(0, V, T).tolist()),
                                    tuple(rng.integers(0, V, T).tolist()), (int(pos),), (int(neg),)))
    return TaskSpec(task_id, "functional", tuple(examples), metric_mode=mode,
                    vocab=tuple(f"t{i}" for i in range(V)))


def random_metric(rng, B, V, mode) -> MetricBatch:
    coeff = np.zeros((B, V))
    for b in range(B):
        pos, neg = rng.choice(V, size=2, replace=False)
        coeff[b, pos], coeff[b, neg] = 1.0, -1.0
    return MetricBatch(mode, coeff)


@pytest.fixture
def tiny():
    return random_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
