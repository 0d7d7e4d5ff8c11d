"""Pairwise circuit similarity, similarity matrices and agglomerative clustering."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .circuits import CircuitEvaluator
from .graph import Circuit
from .model import Model
from .tasks import FAMILIES, TaskSpec

METRICS = ("iou", "recall", "cross_faithfulness")
LINKAGES = ("average", "complete", "ward")


def _check_pair(c1: Circuit, c2: Circuit) -> None:
    if c1.granularity != c2.granularity:
        raise ValueError(f"cannot compare {c1.granularity} and {c2.granularity} circuits")


def iou(c1: Circuit, c2: Circuit) -> float:
    """|C1 & C2| / |C1 | C2|; two empty circuits count as identical (1.0)."""
    _check_pair(c1, c2)
    a, b = c1.member_set, c2.member_set
    union = len(a | b)
    return 1.0 if union == 0 else len(a & b) / union


def recall(c1: Circuit, c2: Circuit) -> float:
    """Fraction of C2's members that C1 also contains."""
    _check_pair(c1, c2)
    if not c2.member_set:
        raise ValueError("recall against an empty circuit is undefined")
    return len(c1.member_set & c2.member_set) / len(c2.member_set)


def cross_task_faithfulness(model: Model, c1: Circuit, task2: TaskSpec,
                            evaluator: CircuitEvaluator | None = None) -> float:
    """Faithfulness of C1 on another task's examples and metric."""
    ev = evaluator or CircuitEvaluator(model, task2)
    return ev.report(c1).F


@dataclass(frozen=True)
class SimilarityMatrix:
    """values[i, j] compares row task i with column task j.

    iou is symmetric.  recall[i, j] = recall(C_i, C_j), the share of task j's
    circuit found in task i's.  cross_faithfulness[i, j] = F(C_i on T_j).
    """

    task_ids: tuple[str, ...]
    families: tuple[str, ...]
    values: np.ndarray
    metric: str
    granularity: str = "edge"

    def __post_init__(self) -> None:
        k = len(self.task_ids)
        if self.values.shape != (k, k) or len(self.families) != k:
            raise ValueError("similarity matrix must be square and match its task list")
        if self.metric not in METRICS and self.metric != "mean":
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def labels(self) -> list[str]:
        return [f"{f}:{t}" for f, t in zip(self.families, self.task_ids)]

    def cell(self, row: str, col: str) -> float:
        return float(self.values[self.task_ids.index(row), self.task_ids.index(col)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task"] + self.labels)
        for label, row in zip(self.labels, self.values):
            w.writerow([label] + [f"{v:.4f}" for v in row])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "metric": self.metric, "granularity": self.granularity,
            "task_ids": list(self.task_ids), "families": list(self.families),
            "values": [[float(v) for v in row] for row in self.values],
            "summary": self.summary(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimilarityMatrix":
        return cls(tuple(doc["task_ids"]), tuple(doc["families"]),
                   np.array(doc["values"], dtype=float), doc["metric"], doc.get("granularity", "edge"))

    def off_diagonal(self) -> list[tuple[int, int]]:
        k = len(self.task_ids)
        if self.metric == "iou":
            return list(itertools.combinations(range(k), 2))
        return [(i, j) for i in range(k) for j in range(k) if i != j]

    def summary(self) -> dict:
        """Median over off-diagonal cells, split by family membership of the pair."""
        groups: dict[str, list[float]] = {"all": [], "cross_family": []}
        for fam in FAMILIES:
            groups[f"within_{fam}"] = []
        for i, j in self.off_diagonal():
            v = float(self.values[i, j])
            groups["all"].append(v)
            fi, fj = self.families[i], self.families[j]
            key = f"within_{fi}" if fi == fj else "cross_family"
            groups.setdefault(key, []).append(v)
        return {k: (float(np.median(v)) if v else None) for k, v in sorted(groups.items())}


def similarity_matrix(circuits: Sequence[Circuit], families: Sequence[str], metric: str = "iou",
                      model: Model | None = None, tasks: Sequence[TaskSpec] | None = None
                      ) -> SimilarityMatrix:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if len({c.granularity for c in circuits}) > 1:
        raise ValueError("all circuits must share one granularity")
    k = len(circuits)
    values = np.zeros((k, k))
    if metric == "cross_faithfulness":
        if model is None or tasks is None:
            raise ValueError("cross-task faithfulness needs the model and the tasks")
        for j, task in enumerate(tasks):
            ev = CircuitEvaluator(model, task)
            for i, c in enumerate(circuits):
                values[i, j] = ev.report(c).F
    else:
        fn = iou if metric == "iou" else recall
        for i, j in itertools.product(range(k), repeat=2):
            values[i, j] = fn(circuits[i], circuits[j])
    return SimilarityMatrix(tuple(c.task_id for c in circuits), tuple(families), values, metric,
                            circuits[0].granularity if circuits else "edge")


def average_matrices(matrices: Sequence[SimilarityMatrix]) -> SimilarityMatrix:
    """Element-wise mean of matrices over the same task list (e.g. across models)."""
    first = matrices[0]
    for m in matrices[1:]:
        if m.task_ids != first.task_ids or m.metric != first.metric:
            raise ValueError("matrices must share task list and metric")
    values = np.mean([m.values for m in matrices], axis=0)
    return SimilarityMatrix(first.task_ids, first.families, values, first.metric, first.granularity)


# -- clustering -------------------------------------------------------------------------

@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    distance: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge list in scipy's convention: leaves are 0..k-1, merge i creates id k+i."""

    labels: tuple[str, ...]
    merges: tuple[Merge, ...]
    linkage: str

    def to_json(self) -> dict:
        return {
            "linkage": self.linkage, "labels": list(self.labels),
            "merges": [{"a": m.a, "b": m.b, "distance": m.distance, "size": m.size} for m in self.merges],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Dendrogram":
        return cls(tuple(doc["labels"]),
                   tuple(Merge(m["a"], m["b"], float(m["distance"]), m["size"]) for m in doc["merges"]),
                   doc["linkage"])

    def as_linkage_matrix(self) -> np.ndarray:
        return np.array([[m.a, m.b, m.distance, m.size] for m in self.merges], dtype=float)

    def leaf_order(self) -> list[int]:
        k = len(self.labels)
        children = {k + i: (m.a, m.b) for i, m in enumerate(self.merges)}

        def walk(node: int) -> list[int]:
            if node < k:
                return [node]
            a, b = children[node]
            return walk(a) + walk(b)

        return walk(k + len(self.merges) - 1) if self.merges else list(range(k))


def pairwise_distances(rows: np.ndarray) -> np.ndarray:
    diff = rows[:, None, :] - rows[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def agglomerate(rows: np.ndarray, linkage: str = "average") -> list[Merge]:
    """Agglomerative clustering of row vectors under Euclidean distance.

    Distances between merged clusters follow the Lance-Williams recurrences
    (ward in its Euclidean form, as in scipy).  Ties go to the pair of active
    clusters with the smallest (id_a, id_b).
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}")
    k = len(rows)
    if k < 2:
        raise ValueError("clustering needs at least two rows")
    D = pairwise_distances(np.asarray(rows, dtype=float))
    dist = {(i, j): D[i, j] for i, j in itertools.combinations(range(k), 2)}
    size = {i: 1 for i in range(k)}
    active = list(range(k))
    merges = []
    for step in range(k - 1):
        best = None
        for i, j in itertools.combinations(active, 2):
            d = dist[(i, j)]
            if best is None or d < best[0]:
                best = (d, i, j)
        d_ij, i, j = best
        new = k + step
        ni, nj = size[i], size[j]
        active = [c for c in active if c not in (i, j)]
        for c in active:
            d_ci = dist[(min(c, i), max(c, i))]
            d_cj = dist[(min(c, j), max(c, j))]
            if linkage == "average":
                d_new = (ni * d_ci + nj * d_cj) / (ni + nj)
            elif linkage == "complete":
                d_new = max(d_ci, d_cj)
            else:
                nc = size[c]
                d_new = np.sqrt(((nc + ni) * d_ci**2 + (nc + nj) * d_cj**2 - nc * d_ij**2)
                                / (nc + ni + nj))
            dist[(c, new)] = float(d_new)
        active.append(new)
        size[new] = ni + nj
        merges.append(Merge(i, j, float(d_ij), ni + nj))
    return merges


def reference_vectors(matrix: SimilarityMatrix) -> np.ndarray:
    """One vector per task describing it against all the others.

    For iou this is the task's row.  For the directional metrics it is the
    task's column: which circuits capture (recall) or solve (cross
    faithfulness) this task.
    """
    values = np.asarray(matrix.values, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError("cluster needs a square matrix")
    return values.T if matrix.metric in ("recall", "cross_faithfulness") else values


def cluster(matrix: SimilarityMatrix, linkage: str = "average") -> Dendrogram:
    """Agglomerative clustering of the tasks' reference vectors."""
    rows = reference_vectors(matrix)
    return Dendrogram(tuple(matrix.labels), tuple(agglomerate(rows, linkage)), linkage)


def dumps(obj: SimilarityMatrix | Dendrogram | Mapping) -> str:
    doc = obj if isinstance(obj, Mapping) else obj.to_json()
    return json.dumps(doc, indent=1, sort_keys=True)
