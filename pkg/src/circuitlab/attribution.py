"""Indirect-effect scores for edges, nodes and neurons.

EAP scores an edge (u -> v, channel c) as the corrupted-minus-clean change of
u's output dotted with the metric gradient at v's channel input, summed over
positions and averaged over examples.  EAP-IG replaces the clean gradient by
the mean gradient along a straight path of input embeddings from the corrupted
to the clean input.  Node and neuron scores use the gradient with respect to
the node's output instead, as a dot product or an elementwise product.

``score_exact`` measures every member's effect by patching it alone; the
sign convention matches the estimates: metric(member corrupted) - metric(clean).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import ComputationalGraph, EdgeId, NodeId, _member_from_json, _member_to_json
from .model import ActivationCache, MetricBatch, Model, build_cache, metric_grad_run, output_grads
from .tasks import TaskSpec

DEFAULT_IG_STEPS = 5
EXACT_MEMBER_LIMIT = 5000


class TooManyMembers(RuntimeError):
    """Exact patching would need too many forward passes; use EAP-IG instead."""


@dataclass(frozen=True)
class ScoreTable:
    granularity: str
    members: tuple
    values: np.ndarray = field(compare=False)
    method: str = "eap"
    steps: int | None = None
    n_examples: int = 0
    task_id: str = ""

    def __post_init__(self) -> None:
        if len(self.members) != len(self.values):
            raise ValueError("one score per member is required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scores must be finite")

    def as_dict(self) -> dict:
        return dict(zip(self.members, self.values.tolist()))

    def __getitem__(self, member) -> float:
        return self.as_dict()[member]

    def to_json(self) -> dict:
        return {
            "granularity": self.granularity,
            "method": self.method,
            "steps": self.steps,
            "n_examples": self.n_examples,
            "task_id": self.task_id,
            "scores": [{"member": _member_to_json(m, None), "value": float(v)}
                       for m, v in zip(self.members, self.values)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ScoreTable":
        g = doc["granularity"]
        members = tuple(_member_from_json(s["member"], g) for s in doc["scores"])
        values = np.array([s["value"] for s in doc["scores"]], dtype=float)
        return cls(g, members, values, doc["method"], doc.get("steps"), doc["n_examples"],
                   doc.get("task_id", ""))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def scores_from_gradients(graph: ComputationalGraph, cache: ActivationCache, grads: np.ndarray,
                          granularity: str) -> np.ndarray:
    """Contract (z' - z) with channel or output gradients, per granularity."""
    diff = cache.corrupted - cache.clean             # [n_out, B, T, d]
    B = diff.shape[1]
    if granularity == "edge":
        flat_d = diff.reshape(graph.n_out, -1)
        flat_g = grads.reshape(grads.shape[0], -1)
        table = flat_d @ flat_g.T / B                 # [n_out, n_channels]
        return table[graph.edge_src, graph.edge_channel]
    g_out = output_grads(graph, grads)
    if granularity == "node":
        return np.einsum("ubtd,ubtd->u", diff, g_out) / B
    if granularity == "neuron":
        return (np.einsum("ubtd,ubtd->ud", diff, g_out) / B).reshape(-1)
    raise ValueError(f"unknown granularity {granularity!r}")


def _table(model: Model, granularity: str, values, method, steps, task: TaskSpec) -> ScoreTable:
    return ScoreTable(granularity, model.graph.members(granularity), np.asarray(values, dtype=float),
                      method, steps, len(task), task.task_id)


def score_eap(model: Model, task: TaskSpec, granularity: str = "edge",
              cache: ActivationCache | None = None) -> ScoreTable:
    if cache is None:
        cache = build_cache(model, task.clean_tokens(), task.corrupted_tokens(),
                            task.metric_batch(model.config.vocab_size))
    values = scores_from_gradients(model.graph, cache, cache.grads, granularity)
    return _table(model, granularity, values, "eap", None, task)


def integrated_gradients(model: Model, clean_tokens, corrupted_tokens, metric: MetricBatch,
                         steps: int) -> np.ndarray:
    """Channel gradients averaged over inputs e' + (k/steps)(e - e'), k = 1..steps.

    k = steps is the clean input itself, so steps=1 gives the plain EAP gradient.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    e_clean = model.embed(clean_tokens)
    e_corr = model.embed(corrupted_tokens)
    total = None
    for k in range(1, steps + 1):
        e_k = None if k == steps else e_corr + (k / steps) * (e_clean - e_corr)
        _, _, G = metric_grad_run(model, clean_tokens, metric, input_override=e_k)
        total = G if total is None else total + G
    return total / steps


def score_eap_ig(model: Model, task: TaskSpec, granularity: str = "edge",
                 steps: int = DEFAULT_IG_STEPS, cache: ActivationCache | None = None) -> ScoreTable:
    if steps < 1:
        raise ValueError("EAP-IG needs steps >= 1")
    clean, corr = task.clean_tokens(), task.corrupted_tokens()
    metric = task.metric_batch(model.config.vocab_size)
    if cache is None:
        cache = build_cache(model, clean, corr)
    grads = integrated_gradients(model, clean, corr, metric, steps)
    values = scores_from_gradients(model.graph, cache, grads, granularity)
    return _table(model, granularity, values, "eap-ig", steps, task)


def score(model: Model, task: TaskSpec, method: str = "eap-ig", granularity: str = "edge",
          steps: int = DEFAULT_IG_STEPS) -> ScoreTable:
    if method == "eap":
        return score_eap(model, task, granularity)
    if method == "eap-ig":
        return score_eap_ig(model, task, granularity, steps)
    if method == "exact":
        return score_exact(model, task, granularity)
    raise ValueError(f"unknown scoring method {method!r}")


# -- exact patching ----------------------------------------------------------------

def single_member_mask(graph: ComputationalGraph, granularity: str, index: int):
    """Intervention masks keeping everything clean except one member."""
    if granularity == "edge":
        mask = np.ones(graph.n_edges)
        mask[index] = 0.0
        return graph.mix_matrix(mask), None
    d = graph.config.d_model
    out = np.ones((graph.n_out, d))
    if granularity == "node":
        out[index] = 0.0
    else:
        out[index // d, index % d] = 0.0
    return None, out


def score_exact(model: Model, task: TaskSpec, granularity: str = "edge",
                limit: int = EXACT_MEMBER_LIMIT, path: str = "rerun") -> ScoreTable:
    """Patch each member alone and record the change in mean metric.

    path="rerun" runs the full intervention engine once per member with that
    member's mask; path="delta" instead adds (z'_u - z_u) to the affected
    channel inputs of an ordinary clean run, batching members together.
    """
    graph = model.graph
    n = graph.n_members(granularity)
    if n > limit:
        raise TooManyMembers(f"{n} {granularity} members exceed the exact-patching limit {limit}")
    clean, corr = task.clean_tokens(), task.corrupted_tokens()
    metric = task.metric_batch(model.config.vocab_size)
    corr_run = model.run(corr)
    base = float(np.mean(metric(model.run(clean).logits[:, -1])[0]))
    if path == "rerun":
        values = np.empty(n)
        for i in range(n):
            mix, out_mix = single_member_mask(graph, granularity, i)
            run = model.run(clean, corrupted=corr_run.outputs, mix=mix, out_mix=out_mix)
            values[i] = np.mean(metric(run.logits[:, -1])[0]) - base
    elif path == "delta":
        values = _exact_by_deltas(model, clean, corr_run.outputs, metric, granularity) - base
    else:
        raise ValueError(f"unknown exact path {path!r}")
    return _table(model, granularity, values, "exact", None, task)


def _exact_by_deltas(model: Model, clean, corrupted_outputs, metric: MetricBatch, granularity: str,
                     chunk: int = 16) -> np.ndarray:
    graph = model.graph
    clean_run = model.run(clean)
    diff = corrupted_outputs - clean_run.outputs
    B = diff.shape[1]
    d = graph.config.d_model
    n = graph.n_members(granularity)
    tokens = model.check_tokens(clean)
    values = np.empty(n)
    for lo in range(0, n, chunk):
        idx = list(range(lo, min(n, lo + chunk)))
        k = len(idx)
        deltas: dict[int, np.ndarray] = {}
        for slot, i in enumerate(idx):
            for ch, patch in _member_patches(graph, granularity, i, diff, d):
                buf = deltas.setdefault(ch, np.zeros((k,) + diff.shape[1:]))
                buf[slot] += patch
        deltas = {ch: buf.reshape((k * B,) + diff.shape[2:]) for ch, buf in deltas.items()}
        run = model.run(np.tile(tokens, (k, 1)), deltas=deltas)
        vals = metric.repeat(k)(run.logits[:, -1])[0].reshape(k, B)
        values[idx] = vals.mean(axis=1)
    return values


def _member_patches(graph: ComputationalGraph, granularity: str, i: int, diff, d: int):
    if granularity == "edge":
        yield int(graph.edge_channel[i]), diff[graph.edge_src[i]]
        return
    if granularity == "node":
        u, patch = i, diff[i]
    else:
        u, dim = divmod(i, d)
        patch = np.zeros_like(diff[u])
        patch[..., dim] = diff[u][..., dim]
    for ch in np.flatnonzero(graph.channel_prefix > u):
        yield int(ch), patch


def member_label(member) -> str:
    if isinstance(member, (EdgeId, NodeId)):
        return str(member)
    return f"{member[0]}[{member[1]}]"
