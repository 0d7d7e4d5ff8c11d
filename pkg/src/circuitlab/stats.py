"""Overlap significance, random dummy-circuit baselines and structural profiles."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .compare import iou
from .graph import KINDS, Circuit, ComputationalGraph, _member_to_json, prune

LOGNORMAL_MU = 0.0
LOGNORMAL_SIGMA = 1.0
EXACT_POPULATION_LIMIT = 2000
HIST_BINS = 10


# -- hypergeometric overlap model --------------------------------------------------------

def _check_counts(population: int, n1: int, n2: int, k: int) -> None:
    if min(population, n1, n2, k) < 0:
        raise ValueError("counts must be non-negative")
    if n1 > population or n2 > population:
        raise ValueError("circuit sizes cannot exceed the population")
    if k > min(n1, n2):
        raise ValueError("overlap cannot exceed the smaller circuit")


def _support(population: int, n1: int, n2: int) -> range:
    return range(max(0, n1 + n2 - population), min(n1, n2) + 1)


def hypergeom_exact(population: int, n1: int, n2: int, k: int, mode: str = "point") -> Fraction:
    """P(K = k) or P(K >= k) as an exact rational, with K = |C1 & C2| for a
    uniformly random C1 of size n1 against a fixed C2 of size n2."""
    _check_counts(population, n1, n2, k)
    total = math.comb(population, n1)

    def count(j: int) -> int:
        return math.comb(n2, j) * math.comb(population - n2, n1 - j)

    if mode == "point":
        return Fraction(count(k), total)
    if mode == "tail":
        return Fraction(sum(count(j) for j in range(k, min(n1, n2) + 1)), total)
    raise ValueError(f"unknown mode {mode!r}")


def _log_comb(n: int, r: int) -> float:
    """log C(n, r) as a compensated sum of small log-ratios.

    Differencing three large log-gamma values loses ~1e-11 at populations of
    a few thousand; this sum stays near machine precision without big integers.
    """
    r = min(r, n - r)
    return math.fsum(math.log((n - r + i) / i) for i in range(1, r + 1))


def log_hypergeom_pmf(population: int, n1: int, n2: int, k: int) -> float:
    _check_counts(population, n1, n2, k)
    if k not in _support(population, n1, n2):
        return -math.inf
    return (_log_comb(n2, k) + _log_comb(population - n2, n1 - k) - _log_comb(population, n1))


def _log_tail_terms(population: int, n1: int, n2: int, k: int) -> list[float]:
    """log p(j) for j = k..max, from one anchor term and the pmf ratio recurrence."""
    support = _support(population, n1, n2)
    j = max(k, support.start)
    if j >= support.stop:
        return []
    terms = [log_hypergeom_pmf(population, n1, n2, j)]
    for j in range(j, support.stop - 1):
        ratio = (n2 - j) * (n1 - j) / ((j + 1) * (population - n2 - n1 + j + 1))
        terms.append(terms[-1] + math.log(ratio))
    return terms


def hypergeom(population: int, n1: int, n2: int, k: int, mode: str = "point") -> float:
    """Point or upper-tail probability of an overlap of k.

    Small populations use exact rational arithmetic; larger ones work with
    log-space terms to avoid overflow.
    """
    if mode not in ("point", "tail"):
        raise ValueError(f"unknown mode {mode!r}")
    if population <= EXACT_POPULATION_LIMIT:
        return float(hypergeom_exact(population, n1, n2, k, mode))
    _check_counts(population, n1, n2, k)
    if mode == "point":
        return math.exp(log_hypergeom_pmf(population, n1, n2, k))
    terms = _log_tail_terms(population, n1, n2, k)
    if not terms:
        return 0.0
    top = max(terms)
    return min(1.0, math.exp(top) * math.fsum(math.exp(t - top) for t in terms))


@dataclass(frozen=True)
class OverlapStats:
    population: int
    n1: int
    n2: int
    k: int
    point: float
    tail: float

    @classmethod
    def of(cls, c1: Circuit, c2: Circuit, population: int) -> "OverlapStats":
        k = len(c1.member_set & c2.member_set)
        n1, n2 = len(c1), len(c2)
        return cls(population, n1, n2, k, hypergeom(population, n1, n2, k, "point"),
                   hypergeom(population, n1, n2, k, "tail"))


# -- dummy circuits -----------------------------------------------------------------------

def dummy_circuit(graph: ComputationalGraph, target_size: int, seed: int,
                  mu: float = LOGNORMAL_MU, sigma: float = LOGNORMAL_SIGMA) -> Circuit:
    """Top-target_size edges under i.i.d. log-normal scores, then pruned."""
    if not 0 <= target_size <= graph.n_edges:
        raise ValueError(f"target_size must lie in [0, {graph.n_edges}]")
    rng = np.random.Generator(np.random.Philox(seed))
    scores = rng.lognormal(mu, sigma, size=graph.n_edges)
    chosen = np.argsort(-np.abs(scores), kind="stable")[:target_size]
    circuit = Circuit(
        "edge", tuple(graph.edges[i] for i in chosen),
        scores={graph.edges[i]: float(scores[i]) for i in chosen},
        task_id="dummy", method="lognormal", qkv_split=graph.qkv_split,
        provenance={"seed": int(seed), "mu": mu, "sigma": sigma, "target_size": target_size},
    )
    return prune(circuit)


def replicate_seeds(seed: int, n_tasks: int, replicates: int) -> list[list[int]]:
    """Independent per-(task, replicate) seeds derived from one root seed."""
    root = np.random.SeedSequence(seed)
    return [[int(s.generate_state(1, np.uint64)[0]) for s in child.spawn(replicates)]
            for child in root.spawn(n_tasks)]


def selected_size(circuit: Circuit) -> int:
    """The pre-prune top-n size recorded by the search, else the member count."""
    return int(circuit.provenance.get("n_selected", len(circuit)))


def baseline_report(circuits: Sequence[Circuit], graph: ComputationalGraph, replicates: int = 20,
                    seed: int = 0) -> dict:
    """Mean IoU of dummy circuits against each real circuit, plus hypergeometric
    upper tails for the observed overlap of every real pair."""
    seeds = replicate_seeds(seed, len(circuits), replicates)
    per_task = []
    for c, task_seeds in zip(circuits, seeds):
        target = selected_size(c)
        ious = [iou(dummy_circuit(graph, target, s), c) for s in task_seeds]
        per_task.append({
            "task": c.task_id, "target_size": target, "replicates": replicates, "seed": seed,
            "mean_dummy_iou": float(np.mean(ious)) if ious else None,
            "dummy_ious": ious,
        })
    pairs = []
    for a, b in itertools.combinations(circuits, 2):
        st = OverlapStats.of(a, b, graph.n_edges)
        pairs.append({"a": a.task_id, "b": b.task_id, "iou": iou(a, b), "overlap": st.k,
                      "size_a": st.n1, "size_b": st.n2, "hypergeom_point": st.point,
                      "hypergeom_tail": st.tail})
    return {
        "population": graph.n_edges,
        "lognormal": {"mu": LOGNORMAL_MU, "sigma": LOGNORMAL_SIGMA},
        "tail": "upper one-sided P(K >= k)",
        "tasks": per_task, "pairs": pairs,
    }


# -- intersection and structure -----------------------------------------------------------

def intersection(circuits: Sequence[Circuit]) -> Circuit:
    if len(circuits) < 2:
        raise ValueError("intersection needs at least two circuits")
    gran = {c.granularity for c in circuits}
    if len(gran) != 1:
        raise ValueError("circuits must share one granularity")
    common = frozenset.intersection(*(c.member_set for c in circuits))
    first = circuits[0]
    return Circuit(first.granularity, tuple(common), task_id="intersection", method="intersection",
                   qkv_split=first.qkv_split, model_config_hash=first.model_config_hash)


def normalized_layer(graph: ComputationalGraph, node) -> float:
    L = graph.config.n_layers
    return graph.node_layer(node) / L if L else 0.0


def edge_type_grid(circuit: Circuit) -> np.ndarray:
    """Counts indexed [source kind, target kind] in (input, head, mlp, logits) order."""
    grid = np.zeros((len(KINDS), len(KINDS)), dtype=int)
    for e in circuit.members:
        grid[KINDS.index(e.src.kind), KINDS.index(e.dst.kind)] += 1
    return grid


def _iou_pairs(circuits: Sequence[Circuit]) -> list[dict]:
    return [{"a": a.task_id, "b": b.task_id, "iou": iou(a, b)}
            for a, b in itertools.combinations(circuits, 2)]


def _median(pairs: list[dict]):
    return float(np.median([p["iou"] for p in pairs])) if pairs else None


def intersect_and_profile(circuits: Sequence[Circuit], graph: ComputationalGraph) -> dict:
    """Intersection circuit, its edge-type grid and layer profile, and the effect
    of excluding the shared members from every task circuit."""
    if any(c.granularity != "edge" for c in circuits):
        raise ValueError("structure profiles need edge circuits")
    common = intersection(circuits)
    start = [normalized_layer(graph, e.src) for e in common.members]
    end = [normalized_layer(graph, e.dst) for e in common.members]
    bins = np.linspace(0.0, 1.0, HIST_BINS + 1)
    reduced = [c.with_members(m for m in c.members if m not in common.member_set) for c in circuits]
    before, after = _iou_pairs(circuits), _iou_pairs(reduced)
    return {
        "task_ids": [c.task_id for c in circuits],
        "intersection": [_member_to_json(m, None) for m in common.members],
        "edge_type_grid": {"kinds": list(KINDS), "counts": edge_type_grid(common).tolist()},
        "layers": {
            "bins": bins.tolist(),
            "start": start, "end": end,
            "start_hist": np.histogram(start, bins=bins)[0].tolist(),
            "end_hist": np.histogram(end, bins=bins)[0].tolist(),
        },
        "exclusion": {
            "sizes_before": [len(c) for c in circuits],
            "sizes_after": [len(c) for c in reduced],
            "iou_before": before, "iou_after": after,
            "median_iou_before": _median(before), "median_iou_after": _median(after),
        },
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True)
