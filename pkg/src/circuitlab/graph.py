"""Computational graph of a toy transformer and circuits over it.

Nodes are the input (token + position embedding), every attention head, every
MLP and the logits.  Every node reads the residual stream, i.e. the sum of the
outputs of all earlier nodes, so there is an edge from every node to every
later node.  Heads of the same layer read the same residual snapshot and are
not connected to each other.  Edges into heads are split into q/k/v channels
unless ``qkv_split`` is off.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .config import ModelConfig

SCHEMA_VERSION = 1
GRANULARITIES = ("edge", "node", "neuron")
CHANNELS = ("q", "k", "v", "direct")
KINDS = ("input", "head", "mlp", "logits")


class CircuitFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NodeId:
    kind: str
    layer: int = -1
    head: int = -1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise CircuitFormatError(f"unknown node kind {self.kind!r}")
        if self.kind == "head" and (self.layer < 0 or self.head < 0):
            raise CircuitFormatError("head nodes need a layer and a head index")
        if self.kind == "mlp" and self.layer < 0:
            raise CircuitFormatError("mlp nodes need a layer")

    @property
    def rank(self) -> float:
        # input < layer-0 heads < mlp 0 < layer-1 heads < ... < logits
        if self.kind == "input":
            return 0
        if self.kind == "head":
            return 1 + 2 * self.layer
        if self.kind == "mlp":
            return 2 + 2 * self.layer
        return math.inf

    @property
    def sort_key(self) -> tuple:
        return (self.rank, self.head)

    def precedes(self, other: "NodeId") -> bool:
        """True when ``self`` writes into the residual stream ``other`` reads."""
        return self.rank < other.rank

    def __str__(self) -> str:
        if self.kind == "head":
            return f"a{self.layer}.h{self.head}"
        if self.kind == "mlp":
            return f"m{self.layer}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        if text in ("input", "logits"):
            return cls(text)
        try:
            if text.startswith("a") and ".h" in text:
                layer, head = text[1:].split(".h")
                return cls("head", int(layer), int(head))
            if text.startswith("m"):
                return cls("mlp", int(text[1:]))
        except ValueError:
            pass
        raise CircuitFormatError(f"unknown node {text!r}")


INPUT = NodeId("input")
LOGITS = NodeId("logits")


@dataclass(frozen=True)
class EdgeId:
    src: NodeId
    dst: NodeId
    channel: str = "direct"

    def __post_init__(self) -> None:
        if self.channel not in CHANNELS:
            raise CircuitFormatError(f"unknown channel {self.channel!r}")
        if self.src.kind == "logits":
            raise CircuitFormatError("edges cannot leave the logits node")
        if self.dst.kind == "input":
            raise CircuitFormatError("edges cannot enter the input node")
        if not self.src.precedes(self.dst):
            raise CircuitFormatError(f"{self.src} does not precede {self.dst}")
        if self.channel != "direct" and self.dst.kind != "head":
            raise CircuitFormatError("q/k/v channels only exist on attention heads")

    @property
    def sort_key(self) -> tuple:
        return (self.dst.sort_key, CHANNELS.index(self.channel), self.src.sort_key)

    def __str__(self) -> str:
        suffix = "" if self.channel == "direct" else f"<{self.channel}>"
        return f"{self.src}->{self.dst}{suffix}"


def member_sort_key(member) -> tuple:
    if isinstance(member, EdgeId):
        return member.sort_key
    if isinstance(member, NodeId):
        return member.sort_key
    node, dim = member
    return (node.sort_key, dim)


class ComputationalGraph:
    """Node/edge skeleton for one ModelConfig.

    Channels are the per-node input slots.  Their order is the layout used by the
    forward engine: for each layer the q channels of all heads, then k, then v
    (or one channel per head when unsplit), then the MLP, and finally the logits.
    Each channel reads a prefix of the node order; ``channel_prefix[c]`` is that
    prefix length.
    """

    def __init__(self, config: ModelConfig, qkv_split: bool = True):
        self.config = config
        self.qkv_split = qkv_split
        L, A = config.n_layers, config.n_heads

        nodes = [INPUT]
        for layer in range(L):
            nodes.extend(NodeId("head", layer, h) for h in range(A))
            nodes.append(NodeId("mlp", layer))
        nodes.append(LOGITS)
        self.nodes: tuple[NodeId, ...] = tuple(nodes)
        self.node_index = {n: i for i, n in enumerate(self.nodes)}
        self.output_nodes = self.nodes[:-1]
        self.n_out = len(self.output_nodes)

        head_channels = ("q", "k", "v") if qkv_split else ("direct",)
        channels: list[tuple[NodeId, str]] = []
        prefix: list[int] = []
        for layer in range(L):
            first_head = 1 + layer * (A + 1)
            for ch in head_channels:
                for h in range(A):
                    channels.append((NodeId("head", layer, h), ch))
                    prefix.append(first_head)
            channels.append((NodeId("mlp", layer), "direct"))
            prefix.append(first_head + A)
        channels.append((LOGITS, "direct"))
        prefix.append(self.n_out)
        self.channels: tuple[tuple[NodeId, str], ...] = tuple(channels)
        self.channel_index = {c: i for i, c in enumerate(self.channels)}
        self.channel_prefix = np.array(prefix, dtype=np.int64)
        self.head_channels = head_channels

        edges, src, chan = [], [], []
        for ci, (dst, ch) in enumerate(self.channels):
            for ui in range(prefix[ci]):
                edges.append(EdgeId(self.output_nodes[ui], dst, ch))
                src.append(ui)
                chan.append(ci)
        self.edges: tuple[EdgeId, ...] = tuple(edges)
        self.edge_index = {e: i for i, e in enumerate(self.edges)}
        self.edge_src = np.array(src, dtype=np.int64)
        self.edge_channel = np.array(chan, dtype=np.int64)

    def __repr__(self) -> str:
        return (f"ComputationalGraph(n_nodes={len(self.nodes)}, n_edges={len(self.edges)}, "
                f"qkv_split={self.qkv_split})")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def members(self, granularity: str) -> tuple:
        if granularity == "edge":
            return self.edges
        if granularity == "node":
            return self.output_nodes
        if granularity == "neuron":
            return self._neurons
        raise ValueError(f"unknown granularity {granularity!r}")

    @cached_property
    def _neurons(self) -> tuple:
        d = self.config.d_model
        return tuple((n, i) for n in self.output_nodes for i in range(d))

    def n_members(self, granularity: str) -> int:
        return len(self.members(granularity))

    def contains(self, member, granularity: str) -> bool:
        if granularity == "edge":
            return member in self.edge_index
        if granularity == "node":
            return member in self.node_index and member != LOGITS
        node, dim = member
        return node in self.node_index and node != LOGITS and 0 <= dim < self.config.d_model

    def mix_matrix(self, edge_mask: np.ndarray) -> np.ndarray:
        """Scatter a per-edge mask into the dense [channel, upstream-node] layout."""
        mix = np.zeros((len(self.channels), self.n_out))
        mix[self.edge_channel, self.edge_src] = edge_mask
        return mix

    def node_layer(self, node: NodeId) -> int:
        """Layer used for depth profiles: input -> 0, logits -> n_layers."""
        if node.kind == "input":
            return 0
        if node.kind == "logits":
            return self.config.n_layers
        return node.layer


def build_graph(config: ModelConfig, qkv_split: bool = True) -> ComputationalGraph:
    return ComputationalGraph(config, qkv_split=qkv_split)


@dataclass(frozen=True)
class Circuit:
    """A scored member set at edge, node or neuron granularity."""

    granularity: str
    members: tuple
    scores: Mapping = field(default_factory=dict)
    task_id: str = ""
    method: str = ""
    threshold: float | None = None
    model_config_hash: str = ""
    qkv_split: bool = True
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.granularity not in GRANULARITIES:
            raise CircuitFormatError(f"unknown granularity {self.granularity!r}")
        ordered = tuple(sorted(set(self.members), key=member_sort_key))
        object.__setattr__(self, "members", ordered)
        for m in ordered:
            _check_member_type(m, self.granularity)
        for v in self.scores.values():
            if not math.isfinite(v):
                raise CircuitFormatError("circuit scores must be finite")

    @cached_property
    def member_set(self) -> frozenset:
        return frozenset(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, member) -> bool:
        return member in self.member_set

    def with_members(self, members: Iterable, **changes) -> "Circuit":
        members = tuple(members)
        scores = {m: self.scores[m] for m in members if m in self.scores}
        fields = dict(
            granularity=self.granularity, members=members, scores=scores,
            task_id=self.task_id, method=self.method, threshold=self.threshold,
            model_config_hash=self.model_config_hash, qkv_split=self.qkv_split,
            provenance=dict(self.provenance),
        )
        fields.update(changes)
        return Circuit(**fields)

    def nodes(self) -> set[NodeId]:
        if self.granularity == "edge":
            return {n for e in self.members for n in (e.src, e.dst)}
        if self.granularity == "node":
            return set(self.members)
        return {n for n, _ in self.members}


def _check_member_type(member, granularity: str) -> None:
    ok = (
        (granularity == "edge" and isinstance(member, EdgeId))
        or (granularity == "node" and isinstance(member, NodeId) and member.kind != "logits")
        or (granularity == "neuron" and isinstance(member, tuple) and len(member) == 2
            and isinstance(member[0], NodeId) and member[0].kind != "logits"
            and isinstance(member[1], (int, np.integer)) and member[1] >= 0)
    )
    if not ok:
        raise CircuitFormatError(f"{member!r} is not a valid {granularity} member")


def validate_circuit(circuit: Circuit, graph: ComputationalGraph) -> None:
    for m in circuit.members:
        if not graph.contains(m, circuit.granularity):
            raise CircuitFormatError(f"{m} is not part of the host graph")


def prune(circuit: Circuit, graph: ComputationalGraph | None = None) -> Circuit:
    """Keep only edges lying on some input -> logits path inside the circuit.

    An edge survives iff its source is reachable from the input and its target
    reaches the logits through circuit edges; this is the fixed point of
    repeatedly dropping edges with a dangling end.
    """
    if circuit.granularity != "edge":
        raise ValueError("prune only applies to edge circuits")
    out_adj: dict[NodeId, list[NodeId]] = defaultdict(list)
    in_adj: dict[NodeId, list[NodeId]] = defaultdict(list)
    for e in circuit.members:
        out_adj[e.src].append(e.dst)
        in_adj[e.dst].append(e.src)
    forward = _reach(INPUT, out_adj)
    backward = _reach(LOGITS, in_adj)
    kept = [e for e in circuit.members if e.src in forward and e.dst in backward]
    return circuit.with_members(kept)


def _reach(start: NodeId, adj: Mapping[NodeId, list[NodeId]]) -> set[NodeId]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj.get(stack.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


# -- JSON ------------------------------------------------------------------

def _member_to_json(member, score) -> dict:
    if isinstance(member, EdgeId):
        out = {"src": str(member.src), "dst": str(member.dst), "channel": member.channel}
    elif isinstance(member, NodeId):
        out = {"node": str(member)}
    else:
        out = {"node": str(member[0]), "dim": int(member[1])}
    if score is not None:
        out["score"] = float(score)
    return out


def _member_from_json(doc: dict, granularity: str):
    if granularity == "edge":
        return EdgeId(NodeId.parse(doc["src"]), NodeId.parse(doc["dst"]), doc.get("channel", "direct"))
    if granularity == "node":
        return NodeId.parse(doc["node"])
    return (NodeId.parse(doc["node"]), int(doc["dim"]))


def circuit_to_json(circuit: Circuit) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "granularity": circuit.granularity,
        "model_config_hash": circuit.model_config_hash,
        "task_id": circuit.task_id,
        "method": circuit.method,
        "threshold": circuit.threshold,
        "qkv_split": circuit.qkv_split,
        "provenance": dict(circuit.provenance),
        "members": [_member_to_json(m, circuit.scores.get(m)) for m in circuit.members],
    }


def circuit_from_json(doc: dict, graph: ComputationalGraph | None = None) -> Circuit:
    if doc.get("version") != SCHEMA_VERSION:
        raise CircuitFormatError(f"unsupported circuit schema version {doc.get('version')!r}")
    granularity = doc.get("granularity")
    if granularity not in GRANULARITIES:
        raise CircuitFormatError(f"unknown granularity {granularity!r}")
    members, scores = [], {}
    for item in doc.get("members", []):
        m = _member_from_json(item, granularity)
        members.append(m)
        if "score" in item:
            scores[m] = float(item["score"])
    circuit = Circuit(
        granularity=granularity,
        members=tuple(members),
        scores=scores,
        task_id=doc.get("task_id", ""),
        method=doc.get("method", ""),
        threshold=doc.get("threshold"),
        model_config_hash=doc.get("model_config_hash", ""),
        qkv_split=doc.get("qkv_split", True),
        provenance=doc.get("provenance", {}),
    )
    if graph is not None:
        validate_circuit(circuit, graph)
    return circuit


def dumps_circuit(circuit: Circuit) -> str:
    return json.dumps(circuit_to_json(circuit), indent=1, sort_keys=True)


def loads_circuit(text: str, graph: ComputationalGraph | None = None) -> Circuit:
    return circuit_from_json(json.loads(text), graph)
