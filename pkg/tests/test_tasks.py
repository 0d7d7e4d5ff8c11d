from __future__ import annotations

import json
from types import SimpleNamespace

import numpy as np
import pytest

from circuitlab.config import ModelConfig
from circuitlab.model import Model, MetricBatch, build_model
from circuitlab.tasks import (KINDS, TOY_VOCAB, TaskError, TaskExample, TaskSpec, eval_accuracy, eval_metric,
                              fact_table, generate_task, load_manifest, load_task, save_manifest, save_task)

W = TOY_VOCAB


def ideal_answer(kind: str, tokens) -> int:
    """A perfect predictor written from the task descriptions, token by token."""
    words = [W[i] for i in tokens]
    if kind == "mirror-retrieval-AB":
        perm = fact_table(0)
        return W.index(f"b{perm[int(words[1][1:])]:02d}")
    if kind == "mirror-retrieval-BA":
        perm = list(fact_table(0))
        return W.index(f"a{perm.index(int(words[1][1:])):02d}")
    if kind == "greater-than-2digit":
        return W.index(f"y{int(words[2][1:]) + 1:02d}")
    if kind == "repeat-last-distinct":
        x, y, last = words[1:4]
        return W.index(x if last == y else y)
    noun = words[1]
    return W.index("are" if noun.startswith("p") else "is")


@pytest.mark.parametrize("kind", KINDS)
def test_generated_examples_hold_invariants(kind):
    task = generate_task(kind, 200, seed=3)
    assert len(task) == 200
    for ex in task.examples:
        assert len(ex.clean) == len(ex.corrupted)
        assert not set(ex.positive) & set(ex.negative)


@pytest.mark.parametrize("kind", KINDS)
def test_corruption_flips_ideal_metric(kind):
    task = generate_task(kind, 100, seed=1)
    metric = task.metric_batch()
    V = len(TOY_VOCAB)
    for which in ("clean", "corrupted"):
        logits = np.zeros((len(task), V))
        for b, ex in enumerate(task.examples):
            logits[b, ideal_answer(kind, getattr(ex, which))] = 50.0
        values, _ = metric(logits)
        assert np.all(values > 0) if which == "clean" else np.all(values < 0)


@pytest.mark.parametrize("kind", KINDS)
def test_generation_is_pure(kind):
    assert generate_task(kind, 50, seed=9) == generate_task(kind, 50, seed=9)
    assert generate_task(kind, 50, seed=9) != generate_task(kind, 50, seed=10)


def test_capacity_exceeded():
    with pytest.raises(TaskError):
        generate_task("repeat-last-distinct", 24 * 23 + 1)


def test_greater_than_sets_for_42():
    task = generate_task("greater-than-2digit", 8 * 97, seed=0)
    y = {w: i for i, w in enumerate(W) if w.startswith("y")}
    ex = next(e for e in task.examples if e.clean[2] == y["y42"])
    assert set(ex.positive) == {y[f"y{k:02d}"] for k in range(43, 100)}
    assert set(ex.negative) == {y[f"y{k:02d}"] for k in range(0, 43)}
    assert ex.corrupted[2] == y["y01"]


def test_mirror_directions_share_one_fact_table():
    ab = generate_task("mirror-retrieval-AB", 552, seed=0)
    ba = generate_task("mirror-retrieval-BA", 552, seed=1)
    forward = {ex.clean[1]: ex.positive[0] for ex in ab.examples}
    backward = {ex.clean[1]: ex.positive[0] for ex in ba.examples}
    assert len(forward) == 24 and len(backward) == 24
    assert all(backward[b] == a for a, b in forward.items())


def test_load_three_line_file(tmp_path):
    p = tmp_path / "t.jsonl"
    lines = [{"clean": [1, 2], "corrupted": [3, 4], "positive": [5], "negative": [6]}] * 3
    p.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
    task = load_task(p)
    assert len(task) == 3 and task.task_id == "t"


def test_length_mismatch_names_line(tmp_path):
    p = tmp_path / "t.jsonl"
    good = {"clean": [1, 2], "corrupted": [3, 4], "positive": [5], "negative": [6]}
    bad = dict(good, corrupted=[3])
    p.write_text("\n".join(json.dumps(x) for x in (good, good, bad)) + "\n")
    with pytest.raises(TaskError, match=r"t\.jsonl:3"):
        load_task(p)


def test_vocab_violation_and_parse_failure(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps({"clean": [1], "corrupted": [2], "positive": [999], "negative": [3]}) + "\n")
    with pytest.raises(TaskError, match=":1"):
        load_task(p)
    p.write_text("{not json\n")
    with pytest.raises(TaskError, match=":1"):
        load_task(p)


def test_save_load_round_trip(tmp_path):
    task = generate_task("greater-than-2digit", 30, seed=2)
    save_task(task, tmp_path / "gt.jsonl")
    back = load_task(tmp_path / "gt.jsonl", task_id=task.task_id, family=task.family,
                     metric_mode=task.metric_mode)
    assert back == task


def test_manifest_round_trip(tmp_path):
    tasks = [generate_task(k, 20, seed=i) for i, k in enumerate(KINDS)]
    save_manifest(tasks, tmp_path)
    assert load_manifest(tmp_path / "manifest.json") == tasks


def test_uniform_logits_give_zero_prob_diff():
    cfg = ModelConfig(1, 1, 8, 4, 8, 6, 4)
    params = build_model(cfg)
    params.W_U[...] = 0.0
    ex = TaskExample((1, 2), (2, 1), (3, 4), (0, 5))
    task = TaskSpec("u", "formal", (ex,), "prob_diff", vocab=tuple("abcdef"))
    assert eval_metric(Model(cfg, params), task) == 0.0


def test_prob_diff_arithmetic():
    metric = MetricBatch("prob_diff", np.array([[1.0, -1.0, 0.0]]))
    values, _ = metric(np.log(np.array([[0.6, 0.1, 0.3]])))
    assert values[0] == pytest.approx(0.5, abs=1e-12)


def test_perfect_ranker_has_full_accuracy():
    task = generate_task("repeat-last-distinct", 50, seed=0)

    class Oracle:
        config = SimpleNamespace(vocab_size=len(W))

        def run(self, tokens):
            logits = np.zeros(tokens.shape + (len(W),))
            for b, row in enumerate(tokens):
                logits[b, -1, ideal_answer("repeat-last-distinct", row)] = 5.0
            return SimpleNamespace(logits=logits)

    assert eval_accuracy(Oracle(), task) == 1.0


def test_coin_flip_accuracy_is_near_half():
    n = 10_000
    ex = TaskExample((0,), (1,), (0,), (1,))
    task = TaskSpec("coin", "functional", (ex,) * n, "prob_diff", vocab=("h", "t"))
    rng = np.random.default_rng(0)

    class Coin:
        config = SimpleNamespace(vocab_size=2)

        def run(self, tokens):
            return SimpleNamespace(logits=rng.normal(size=tokens.shape + (2,)))

    assert abs(eval_accuracy(Coin(), task) - 0.5) <= 0.02
