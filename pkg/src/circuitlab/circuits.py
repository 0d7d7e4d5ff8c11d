"""Circuit interventions, normalized faithfulness and minimal-circuit search.

A circuit is evaluated by rerunning the model on clean inputs while every
out-of-circuit member is patched with its value from an independent corrupted
run: for edges, a channel's input sums clean outputs over circuit edges and
corrupted outputs over the rest; for nodes (or single output dimensions), the
node output itself is replaced.  Faithfulness normalizes the circuit metric
between the fully corrupted run (0) and the clean run (1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attribution import ScoreTable
from .graph import Circuit, ComputationalGraph, prune, validate_circuit
from .model import Model, Run
from .tasks import TaskSpec

DEFAULT_THRESHOLD = 0.85
SEPARATION_EPS = 1e-6


class DegenerateTask(ValueError):
    """Clean and corrupted metrics are too close for a meaningful ratio."""


class SearchFailed(RuntimeError):
    pass


# -- masks ----------------------------------------------------------------------------

def member_mask(graph: ComputationalGraph, granularity: str, members) -> np.ndarray:
    """0/1 vector over the graph's members in canonical order."""
    if granularity == "edge":
        index = graph.edge_index
        mask = np.zeros(graph.n_edges)
        for m in members:
            mask[index[m]] = 1.0
        return mask
    d = graph.config.d_model
    mask = np.zeros(graph.n_members(granularity))
    for m in members:
        if granularity == "node":
            mask[graph.node_index[m]] = 1.0
        else:
            mask[graph.node_index[m[0]] * d + m[1]] = 1.0
    return mask


def intervention(graph: ComputationalGraph, granularity: str, mask: np.ndarray):
    """(mix, out_mix) keyword values for Model.run from a member mask."""
    if granularity == "edge":
        return graph.mix_matrix(mask), None
    if granularity == "node":
        return None, np.repeat(mask[:, None], graph.config.d_model, axis=1)
    if granularity == "neuron":
        return None, mask.reshape(graph.n_out, graph.config.d_model)
    raise ValueError(f"unknown granularity {granularity!r}")


def apply_circuit(model: Model, circuit: Circuit, clean_tokens, corrupted_outputs: np.ndarray) -> Run:
    """Clean run with all members outside the circuit patched from the corrupted run."""
    if corrupted_outputs is None:
        raise ValueError("apply_circuit needs the corrupted run's node outputs")
    if circuit.granularity == "edge" and circuit.qkv_split != model.qkv_split:
        raise ValueError("circuit and model disagree on q/k/v splitting")
    graph = model.graph
    validate_circuit(circuit, graph)
    mask = member_mask(graph, circuit.granularity, circuit.members)
    mix, out_mix = intervention(graph, circuit.granularity, mask)
    return model.run(clean_tokens, corrupted=corrupted_outputs, mix=mix, out_mix=out_mix)


# -- faithfulness -----------------------------------------------------------------------

@dataclass(frozen=True)
class FaithfulnessReport:
    task: str
    m: float
    m_null: float
    m_circuit: float
    F: float
    n_members: int
    fraction_of_graph: float

    def to_json(self) -> dict:
        return {
            "task": self.task, "m": self.m, "m_null": self.m_null, "m_circuit": self.m_circuit,
            "F": self.F, "n_members": self.n_members, "fraction_of_graph": self.fraction_of_graph,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def normalized_faithfulness(m: float, m_null: float, m_circuit: float,
                            eps: float = SEPARATION_EPS) -> float:
    denom = m - m_null
    if not abs(denom) > eps:
        raise DegenerateTask(f"|m - m_null| = {abs(denom):.3g} is not above {eps:g}")
    return (m_circuit - m_null) / denom


class CircuitEvaluator:
    """Caches the clean/corrupted runs of one (model, task) pair for repeated scoring."""

    def __init__(self, model: Model, task: TaskSpec, eps: float = SEPARATION_EPS):
        self.model = model
        self.task = task
        self.eps = eps
        self.graph = model.graph
        self.clean = model.check_tokens(task.clean_tokens())
        self.metric = task.metric_batch(model.config.vocab_size)
        corr = model.run(task.corrupted_tokens())
        self.corrupted = corr.outputs
        self.m = self._mean(model.run(self.clean))
        self.m_null = self._mean(corr)

    def _mean(self, run: Run) -> float:
        return float(np.mean(self.metric(run.logits[:, -1])[0]))

    def metric_for_mask(self, granularity: str, mask: np.ndarray) -> float:
        mix, out_mix = intervention(self.graph, granularity, mask)
        return self._mean(self.model.run(self.clean, corrupted=self.corrupted, mix=mix, out_mix=out_mix))

    def faithfulness_for_mask(self, granularity: str, mask: np.ndarray) -> float:
        return normalized_faithfulness(self.m, self.m_null, self.metric_for_mask(granularity, mask),
                                       self.eps)

    def report(self, circuit: Circuit) -> FaithfulnessReport:
        validate_circuit(circuit, self.graph)
        mask = member_mask(self.graph, circuit.granularity, circuit.members)
        m_c = self.metric_for_mask(circuit.granularity, mask)
        total = self.graph.n_members(circuit.granularity)
        return FaithfulnessReport(
            task=self.task.task_id, m=self.m, m_null=self.m_null, m_circuit=m_c,
            F=normalized_faithfulness(self.m, self.m_null, m_c, self.eps),
            n_members=len(circuit), fraction_of_graph=len(circuit) / total,
        )


def faithfulness(model: Model, circuit: Circuit, task: TaskSpec,
                 eps: float = SEPARATION_EPS) -> FaithfulnessReport:
    return CircuitEvaluator(model, task, eps).report(circuit)


# -- top-n and search -------------------------------------------------------------------

def ranking(scores: ScoreTable) -> np.ndarray:
    """Member indices by descending |score|; ties keep canonical member order."""
    return np.argsort(-np.abs(scores.values), kind="stable")


def select_top_n(scores: ScoreTable, n: int, **circuit_fields) -> Circuit:
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > len(scores.members):
        raise ValueError(f"n={n} exceeds the {len(scores.members)} scored members")
    chosen = ranking(scores)[:n]
    members = tuple(scores.members[i] for i in chosen)
    fields_ = dict(task_id=scores.task_id, method=scores.method)
    fields_.update(circuit_fields)
    return Circuit(scores.granularity, members,
                   scores={scores.members[i]: float(scores.values[i]) for i in chosen}, **fields_)


@dataclass(frozen=True)
class SearchParams:
    threshold: float = DEFAULT_THRESHOLD
    granularity: str = "edge"
    method: str = "eap-ig"
    steps: int = 5
    coarse_factor: int = 2
    verify_window: int | None = None   # None scans every smaller n

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.coarse_factor < 2:
            raise ValueError("coarse_factor must be at least 2")
        if self.verify_window is not None and self.verify_window < 0:
            raise ValueError("verify_window must be non-negative")


def search_min_n(f: Callable[[int], float], n_max: int, threshold: float, factor: int = 2,
                 verify_window: int | None = None) -> tuple[int, dict[int, float]]:
    """Smallest n in [0, n_max] with f(n) >= threshold.

    Geometric sweep 1, factor, factor^2, ... until the threshold is met, binary
    refinement inside the bracket, then a downward scan below the candidate in
    case f is not monotone.  With verify_window=None the scan covers every
    smaller n, so the answer equals that of a linear sweep.  Returns the n and
    every evaluated value.
    """
    seen: dict[int, float] = {}

    def F(n: int) -> float:
        if n not in seen:
            seen[n] = float(f(n))
        return seen[n]

    if F(n_max) < threshold:
        raise SearchFailed(f"even n={n_max} reaches only {seen[n_max]:.4f} < {threshold}")
    lo, hi = 0, 1
    while hi < n_max and F(hi) < threshold:
        lo, hi = hi, min(hi * factor, n_max)
    hi = min(hi, n_max)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if F(mid) >= threshold:
            hi = mid
        else:
            lo = mid
    stop = 0 if verify_window is None else max(0, hi - verify_window)
    best = hi
    for n in range(hi - 1, stop - 1, -1):
        if F(n) >= threshold:
            best = n
    return best, seen


@dataclass(frozen=True)
class SearchResult:
    circuit: Circuit
    report: FaithfulnessReport
    n: int
    profile: dict = field(default_factory=dict)


def find_minimal_circuit(model: Model, task: TaskSpec, scores: ScoreTable,
                         params: SearchParams = SearchParams(),
                         evaluator: CircuitEvaluator | None = None) -> SearchResult:
    """Smallest top-n circuit reaching the faithfulness threshold.

    Edge circuits are pruned after the search; pruning cannot change F.
    """
    if scores.granularity != params.granularity:
        raise ValueError("score table granularity does not match the search parameters")
    ev = evaluator or CircuitEvaluator(model, task)
    order = ranking(scores)
    total = len(order)

    def f(n: int) -> float:
        mask = np.zeros(total)
        mask[order[:n]] = 1.0
        return ev.faithfulness_for_mask(params.granularity, mask)

    n, profile = search_min_n(f, total, params.threshold, params.coarse_factor, params.verify_window)
    circuit = select_top_n(
        scores, n, threshold=params.threshold, model_config_hash=model.config.hash(),
        qkv_split=model.qkv_split,
        provenance={"n_selected": n, "steps": scores.steps, "coarse_factor": params.coarse_factor,
                    "verify_window": params.verify_window},
    )
    if circuit.granularity == "edge":
        circuit = prune(circuit)
    return SearchResult(circuit, ev.report(circuit), n, dict(sorted(profile.items())))
