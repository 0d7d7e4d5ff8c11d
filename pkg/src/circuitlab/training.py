"""Adam training of the toy transformer on task answer positions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .model import Model, ModelParams, build_model, log_softmax, make_rng, softmax
from .tasks import TaskSpec

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)


def _targets(task: TaskSpec, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Training rows for a task: clean inputs aim at the answer (or positive set),
    corrupted inputs at the corrupted answer (or negative set)."""
    rows, weights = [], []
    for ex in task.examples:
        for toks, single, fallback in ((ex.clean, ex.answer, ex.positive),
                                       (ex.corrupted, ex.corrupted_answer, ex.negative)):
            w = np.zeros(vocab_size)
            w[[single] if single is not None else list(fallback)] = 1.0
            rows.append(toks)
            weights.append(w)
    return np.array(rows, dtype=np.int64), np.array(weights)


def set_cross_entropy(last_logits: np.ndarray, target_w: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of -log(sum of probability on each row's target set) and its logit gradient."""
    logp = log_softmax(last_logits)
    masked = np.where(target_w > 0, logp, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    log_in_set = top[:, 0] + np.log(np.exp(masked - top).sum(axis=-1))
    loss = -float(np.mean(log_in_set))
    q = np.where(target_w > 0, np.exp(masked - log_in_set[:, None]), 0.0)
    grad = (softmax(last_logits) - q) / last_logits.shape[0]
    return loss, grad


def loss_and_grads(model: Model, tokens: np.ndarray, target_w: np.ndarray):
    run = model.run(tokens, keep_trace=True)
    loss, g_last = set_cross_entropy(run.logits[:, -1, :], target_w)
    g_logits = np.zeros_like(run.logits)
    g_logits[:, -1, :] = g_last
    _, grads = model.backward(run, g_logits, want_params=True)
    return loss, grads


def train(
    config: ModelConfig,
    tasks: TaskSpec | Sequence[TaskSpec],
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 64,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    params: ModelParams | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Train on one or more tasks; each step averages one minibatch per task.

    Deterministic for a fixed config.seed: minibatches come from a Philox
    stream derived from the seed and updates run in a fixed order.
    """
    if isinstance(tasks, TaskSpec):
        tasks = [tasks]
    params = build_model(config) if params is None else params.copy()
    model = Model(config, params)
    data = [_targets(t, config.vocab_size) for t in tasks]
    rng = make_rng(config.seed + 1)
    m1 = params.zeros_like()
    m2 = params.zeros_like()
    b1, b2 = betas
    losses: list[float] = []

    for step in range(1, steps + 1):
        total = 0.0
        acc = params.zeros_like()
        for rows, weights in data:
            idx = rng.integers(0, len(rows), size=min(batch_size, len(rows)))
            loss, grads = loss_and_grads(model, rows[idx], weights[idx])
            total += loss
            for name, g in grads.blocks():
                getattr(acc, name)[...] += g
        total /= len(data)
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite loss {total} at step {step}")
        losses.append(total)
        for name, p in params.blocks():
            g = getattr(acc, name) / len(data)
            mom, vel = getattr(m1, name), getattr(m2, name)
            mom *= b1
            mom += (1 - b1) * g
            vel *= b2
            vel += (1 - b2) * g * g
            mhat = mom / (1 - b1**step)
            vhat = vel / (1 - b2**step)
            if weight_decay:
                p -= lr * weight_decay * p
            p -= lr * mhat / (np.sqrt(vhat) + eps)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, total)
    return TrainResult(params=params, losses=losses)
