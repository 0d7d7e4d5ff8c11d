"""Clean/corrupted task definitions, toy task generators and metric evaluation.

All generated kinds share one closed toy vocabulary (``TOY_VOCAB``) so that a
single model can be trained on several tasks and their circuits compared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MetricBatch, Model, make_rng

FAMILIES = ("formal", "functional")
KINDS = (
    "mirror-retrieval-AB",
    "mirror-retrieval-BA",
    "greater-than-2digit",
    "repeat-last-distinct",
    "parity-agreement",
)

N_FACTS = 24
N_NAMES = 24
N_EVENTS = 8
N_AGREE_NOUNS = 8
N_FILLERS = 8
MIN_START_YEAR = 2
MAX_START_YEAR = 98
CORRUPT_YEAR = 1
MAX_YEAR_GAP = 5


def _toy_vocab() -> tuple[str, ...]:
    words = ["<pad>", "<gt>", "<rel>", "<rep>", "<par>", "?", "<", "is", "was", "are", "were"]
    words += [f"y{i:02d}" for i in range(100)]
    words += [f"a{i:02d}" for i in range(N_FACTS)]
    words += [f"b{i:02d}" for i in range(N_FACTS)]
    words += [f"n{i:02d}" for i in range(N_NAMES)]
    words += [f"e{i}" for i in range(N_EVENTS)]
    words += [f"s{i}" for i in range(N_AGREE_NOUNS)]
    words += [f"p{i}" for i in range(N_AGREE_NOUNS)]
    words += [f"f{i}" for i in range(N_FILLERS)]
    return tuple(words)


TOY_VOCAB = _toy_vocab()
TOY_INDEX = {w: i for i, w in enumerate(TOY_VOCAB)}

DEFAULT_FAMILY = {
    "mirror-retrieval-AB": "functional",
    "mirror-retrieval-BA": "functional",
    "greater-than-2digit": "functional",
    "repeat-last-distinct": "functional",
    "parity-agreement": "formal",
}
DEFAULT_METRIC = {
    "mirror-retrieval-AB": "logit_diff",
    "mirror-retrieval-BA": "logit_diff",
    "greater-than-2digit": "prob_diff",
    "repeat-last-distinct": "logit_diff",
    "parity-agreement": "prob_diff",
}


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskExample:
    """One clean/corrupted pair.

    ``positive``/``negative`` are the token sets the metric compares at the final
    position of the clean input.  ``answer`` and ``corrupted_answer`` are optional
    single-token training targets; without them training uses the sets.
    """

    clean: tuple[int, ...]
    corrupted: tuple[int, ...]
    positive: tuple[int, ...]
    negative: tuple[int, ...]
    answer: int | None = None
    corrupted_answer: int | None = None

    def __post_init__(self) -> None:
        if len(self.clean) != len(self.corrupted):
            raise TaskError(f"clean and corrupted inputs differ in length "
                            f"({len(self.clean)} vs {len(self.corrupted)})")
        if not self.positive or not self.negative:
            raise TaskError("positive and negative token sets must be non-empty")
        if set(self.positive) & set(self.negative):
            raise TaskError("positive and negative token sets overlap")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str
    examples: tuple[TaskExample, ...]
    metric_mode: str = "logit_diff"
    vocab: tuple[str, ...] = field(default=TOY_VOCAB, compare=False)
    metric_scale: float = 1.0
    metric_offset: float = 0.0

    def __post_init__(self) -> None:
        if not self.examples:
            raise TaskError("a task needs at least one example")
        if self.family not in FAMILIES:
            raise TaskError(f"family must be one of {FAMILIES}, got {self.family!r}")
        lengths = {len(ex.clean) for ex in self.examples}
        if len(lengths) != 1:
            raise TaskError("all examples of a task must share one token length")
        V = len(self.vocab)
        for i, ex in enumerate(self.examples):
            ids = ex.clean + ex.corrupted + ex.positive + ex.negative
            if min(ids) < 0 or max(ids) >= V:
                raise TaskError(f"example {i}: token id outside vocabulary of size {V}")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def length(self) -> int:
        return len(self.examples[0].clean)

    def clean_tokens(self) -> np.ndarray:
        return np.array([ex.clean for ex in self.examples], dtype=np.int64)

    def corrupted_tokens(self) -> np.ndarray:
        return np.array([ex.corrupted for ex in self.examples], dtype=np.int64)

    def metric_batch(self, vocab_size: int | None = None) -> MetricBatch:
        V = vocab_size or len(self.vocab)
        coeff = np.zeros((len(self.examples), V))
        for b, ex in enumerate(self.examples):
            if max(ex.positive + ex.negative) >= V:
                raise TaskError("metric references tokens outside the model vocabulary")
            if self.metric_mode == "prob_diff":
                pos_w, neg_w = 1.0, 1.0
            else:
                pos_w, neg_w = 1.0 / len(ex.positive), 1.0 / len(ex.negative)
            coeff[b, list(ex.positive)] += pos_w
            coeff[b, list(ex.negative)] -= neg_w
        return MetricBatch(self.metric_mode, coeff, self.metric_scale, self.metric_offset)

    def subset(self, n: int) -> "TaskSpec":
        return self.replace(examples=self.examples[:n])

    def replace(self, **changes) -> "TaskSpec":
        fields_ = dict(task_id=self.task_id, family=self.family, examples=self.examples,
                       metric_mode=self.metric_mode, vocab=self.vocab,
                       metric_scale=self.metric_scale, metric_offset=self.metric_offset)
        fields_.update(changes)
        return TaskSpec(**fields_)


# -- generators -----------------------------------------------------------------

def fact_table(fact_seed: int = 0) -> np.ndarray:
    """Bijection a_i -> b_perm[i] shared by both mirror-retrieval directions."""
    return make_rng(fact_seed).permutation(N_FACTS)


def _pick(rng: np.random.Generator, capacity: int, size: int, kind: str) -> np.ndarray:
    if size > capacity:
        raise TaskError(f"{kind}: {size} examples requested but only {capacity} distinct ones exist")
    if size < 1:
        raise TaskError("size must be at least 1")
    return rng.choice(capacity, size=size, replace=False)


def generate_task(kind: str, size: int = 500, seed: int = 0, *, task_id: str | None = None,
                  family: str | None = None, fact_seed: int = 0) -> TaskSpec:
    """Deterministic toy task of the given kind.

    mirror-retrieval-AB   <rel> a_i ?  -> b_f(i); corrupted queries another a_j
    mirror-retrieval-BA   <rel> b_k ?  -> a_f^-1(k); the same fact table read backwards
    greater-than-2digit   <gt> e YY <  -> a year > YY; corrupted sets YY to 01
    repeat-last-distinct  <rep> x y y  -> x; corrupted is <rep> x y x (-> y)
    parity-agreement      <par> noun f f -> verb agreeing in number; corrupted flips the noun
    """
    if kind not in KINDS:
        raise TaskError(f"unknown task kind {kind!r}")
    rng = make_rng(seed)
    t = TOY_INDEX
    examples: list[TaskExample] = []

    if kind.startswith("mirror-retrieval"):
        perm = fact_table(fact_seed)
        inv = np.argsort(perm)
        for idx in _pick(rng, N_FACTS * (N_FACTS - 1), size, kind):
            i, j = divmod(int(idx), N_FACTS - 1)
            j = j + (j >= i)
            if kind.endswith("AB"):
                q_i, q_j = t[f"a{i:02d}"], t[f"a{j:02d}"]
                ans_i, ans_j = t[f"b{perm[i]:02d}"], t[f"b{perm[j]:02d}"]
            else:
                q_i, q_j = t[f"b{i:02d}"], t[f"b{j:02d}"]
                ans_i, ans_j = t[f"a{inv[i]:02d}"], t[f"a{inv[j]:02d}"]
            examples.append(TaskExample(
                clean=(t["<rel>"], q_i, t["?"]), corrupted=(t["<rel>"], q_j, t["?"]),
                positive=(ans_i,), negative=(ans_j,), answer=ans_i, corrupted_answer=ans_j))

    elif kind == "greater-than-2digit":
        n_years = MAX_START_YEAR - MIN_START_YEAR + 1
        for idx in _pick(rng, N_EVENTS * n_years, size, kind):
            event, off = divmod(int(idx), n_years)
            yy = MIN_START_YEAR + off
            gap = int(rng.integers(1, min(MAX_YEAR_GAP, 99 - yy) + 1))
            cgap = int(rng.integers(1, MAX_YEAR_GAP + 1))
            prefix = (t["<gt>"], t[f"e{event}"])
            examples.append(TaskExample(
                clean=prefix + (t[f"y{yy:02d}"], t["<"]),
                corrupted=prefix + (t[f"y{CORRUPT_YEAR:02d}"], t["<"]),
                positive=tuple(t[f"y{y:02d}"] for y in range(yy + 1, 100)),
                negative=tuple(t[f"y{y:02d}"] for y in range(0, yy + 1)),
                answer=t[f"y{yy + gap:02d}"],
                corrupted_answer=t[f"y{CORRUPT_YEAR + cgap:02d}"]))

    elif kind == "repeat-last-distinct":
        for idx in _pick(rng, N_NAMES * (N_NAMES - 1), size, kind):
            i, j = divmod(int(idx), N_NAMES - 1)
            j = j + (j >= i)
            x, y = t[f"n{i:02d}"], t[f"n{j:02d}"]
            examples.append(TaskExample(
                clean=(t["<rep>"], x, y, y), corrupted=(t["<rep>"], x, y, x),
                positive=(x,), negative=(y,), answer=x, corrupted_answer=y))

    else:  # parity-agreement
        n_nouns = 2 * N_AGREE_NOUNS
        singular = (t["is"], t["was"])
        plural = (t["are"], t["were"])
        for idx in _pick(rng, n_nouns * N_FILLERS * N_FILLERS, size, kind):
            noun, rest = divmod(int(idx), N_FILLERS * N_FILLERS)
            f1, f2 = divmod(rest, N_FILLERS)
            is_plural = noun >= N_AGREE_NOUNS
            stem = noun % N_AGREE_NOUNS
            clean_noun = t[f"p{stem}"] if is_plural else t[f"s{stem}"]
            flip_noun = t[f"s{stem}"] if is_plural else t[f"p{stem}"]
            fill = (t[f"f{f1}"], t[f"f{f2}"])
            examples.append(TaskExample(
                clean=(t["<par>"], clean_noun) + fill, corrupted=(t["<par>"], flip_noun) + fill,
                positive=plural if is_plural else singular,
                negative=singular if is_plural else plural))

    return TaskSpec(
        task_id=task_id or kind,
        family=family or DEFAULT_FAMILY[kind],
        examples=tuple(examples),
        metric_mode=DEFAULT_METRIC[kind],
    )


# -- files --------------------------------------------------------------------------

def save_task(task: TaskSpec, path) -> None:
    lines = []
    for ex in task.examples:
        doc = {"clean": list(ex.clean), "corrupted": list(ex.corrupted),
               "positive": list(ex.positive), "negative": list(ex.negative)}
        if ex.answer is not None:
            doc["answer"] = ex.answer
        if ex.corrupted_answer is not None:
            doc["corrupted_answer"] = ex.corrupted_answer
        lines.append(json.dumps(doc, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_task(path, task_id: str | None = None, family: str = "functional",
              metric_mode: str = "logit_diff", vocab: Sequence[str] | None = None) -> TaskSpec:
    path = Path(path)
    vocab = tuple(vocab) if vocab is not None else TOY_VOCAB
    examples = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                ex = TaskExample(
                    clean=tuple(int(i) for i in doc["clean"]),
                    corrupted=tuple(int(i) for i in doc["corrupted"]),
                    positive=tuple(int(i) for i in doc["positive"]),
                    negative=tuple(int(i) for i in doc["negative"]),
                    answer=doc.get("answer"),
                    corrupted_answer=doc.get("corrupted_answer"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise TaskError(f"{path}:{lineno}: {err}") from err
            ids = ex.clean + ex.corrupted + ex.positive + ex.negative
            if min(ids) < 0 or max(ids) >= len(vocab):
                raise TaskError(f"{path}:{lineno}: token id outside vocabulary of size {len(vocab)}")
            examples.append(ex)
    if not examples:
        raise TaskError(f"{path}: no examples")
    return TaskSpec(task_id=task_id or path.stem, family=family, examples=tuple(examples),
                    metric_mode=metric_mode, vocab=vocab)


def save_manifest(tasks: Sequence[TaskSpec], directory) -> Path:
    """Write every task as JSONL plus a manifest.json listing id, family, path, metric."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for task in tasks:
        fname = f"{task.task_id}.jsonl"
        save_task(task, directory / fname)
        entries.append({"id": task.task_id, "family": task.family, "path": fname,
                        "metric": task.metric_mode})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"vocab": list(tasks[0].vocab), "tasks": entries}, indent=1) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for entry in doc["tasks"]:
        task_path = path.parent / entry["path"]
        entries.append(dict(entry, path=task_path, vocab=doc.get("vocab")))
    return entries


def load_manifest(path) -> list[TaskSpec]:
    tasks = []
    for entry in read_manifest(path):
        if not entry["path"].exists():
            raise TaskError(f"task file {entry['path']} does not exist")
        tasks.append(load_task(entry["path"], task_id=entry["id"], family=entry["family"],
                               metric_mode=entry.get("metric", "logit_diff"), vocab=entry["vocab"]))
    return tasks


# -- evaluation -----------------------------------------------------------------------

def metric_values(model: Model, task: TaskSpec, which: str = "clean") -> np.ndarray:
    """Per-example metric; corrupted runs are scored with the clean example's sets."""
    if which not in ("clean", "corrupted"):
        raise ValueError("which must be 'clean' or 'corrupted'")
    tokens = task.clean_tokens() if which == "clean" else task.corrupted_tokens()
    logits = model.run(tokens).logits[:, -1, :]
    values, _ = task.metric_batch(model.config.vocab_size)(logits)
    return values


def eval_metric(model: Model, task: TaskSpec, which: str = "clean") -> float:
    return float(np.mean(metric_values(model, task, which)))


def eval_accuracy(model: Model, task: TaskSpec) -> float:
    """Fraction of examples where the positive set beats the negative set."""
    if task.metric_mode == "logit_diff_squared":
        raise ValueError("accuracy is undefined for a squared metric")
    raw = task.replace(metric_scale=1.0, metric_offset=0.0)
    return float(np.mean(metric_values(model, raw, "clean") > 0))
