from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuitlab.config import ModelConfig
from circuitlab.graph import (INPUT, LOGITS, Circuit, CircuitFormatError, EdgeId, NodeId, build_graph,
                              circuit_to_json, dumps_circuit, loads_circuit, prune)


def cfg(L, A):
    return ModelConfig(L, A, 8, 4, 8, 10, 4)


def enumerate_edges(L, A, split=True):
    """Independent enumeration following the node order."""
    order = [("input",)]
    for l in range(L):
        order += [("head", l, h) for h in range(A)] + [("mlp", l)]
    order.append(("logits",))

    def level(n):
        if n[0] == "input":
            return -1
        if n[0] == "logits":
            return 2 * L
        return 2 * n[1] + (0 if n[0] == "head" else 1)

    edges = []
    for u in order:
        for v in order:
            if u[0] == "logits" or v[0] == "input" or level(u) >= level(v):
                continue
            chans = ("q", "k", "v") if (v[0] == "head" and split) else ("direct",)
            edges += [(u, v, c) for c in chans]
    return edges


def test_single_layer_single_head_has_eight_edges():
    assert build_graph(cfg(1, 1)).n_edges == 8


def test_two_by_two_has_46_edges():
    g = build_graph(cfg(2, 2))
    assert g.n_edges == 46 == len(enumerate_edges(2, 2))
    assert build_graph(cfg(2, 2), qkv_split=False).n_edges == len(enumerate_edges(2, 2, False)) == 26


def test_zero_layers_single_edge():
    g = build_graph(ModelConfig(0, 1, 4, 2, 4, 5, 3))
    assert g.edges == (EdgeId(INPUT, LOGITS, "direct"),)


@pytest.mark.parametrize("L", range(0, 5))
@pytest.mark.parametrize("A", range(1, 5))
def test_edge_count_matches_enumeration(L, A):
    g = build_graph(cfg(L, A))
    assert g.n_edges == len(enumerate_edges(L, A))
    assert len(g.nodes) == 2 + L * (A + 1)
    assert len(set(g.edges)) == g.n_edges


def test_no_edges_between_same_layer_heads():
    g = build_graph(cfg(2, 3))
    assert not any(e.src.kind == e.dst.kind == "head" and e.src.layer == e.dst.layer for e in g.edges)


def test_edge_invariants_enforced():
    with pytest.raises(ValueError):
        EdgeId(LOGITS, INPUT, "direct")
    with pytest.raises(ValueError):
        EdgeId(INPUT, NodeId("mlp", 0), "q")
    with pytest.raises(ValueError):
        EdgeId(NodeId("head", 0, 0), NodeId("head", 0, 1), "v")


def test_prune_keeps_a_path():
    m0 = NodeId("mlp", 0)
    c = Circuit("edge", (EdgeId(INPUT, m0, "direct"), EdgeId(m0, LOGITS, "direct")))
    assert prune(c) == c


def test_prune_drops_dangling_source():
    c = Circuit("edge", (EdgeId(NodeId("head", 1, 0), LOGITS, "direct"),))
    assert len(prune(c)) == 0


def naive_prune(edges):
    edges = set(edges)
    while True:
        has_in = {e.dst for e in edges} | {INPUT}
        has_out = {e.src for e in edges} | {LOGITS}
        kept = {e for e in edges if e.src in has_in and e.dst in has_out}
        if kept == edges:
            return kept
        edges = kept


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 46))
def test_prune_equals_repeated_filter(seed, size):
    g = build_graph(cfg(2, 2))
    idx = np.random.default_rng(seed).choice(g.n_edges, size=size, replace=False)
    c = Circuit("edge", tuple(g.edges[i] for i in idx))
    pruned = prune(c)
    assert pruned.member_set == naive_prune(c.members)
    assert prune(pruned) == pruned
    assert pruned.member_set <= c.member_set


def test_fifty_edge_subset_of_two_layer_graph():
    g = build_graph(cfg(2, 2))
    assert g.n_edges == 46
    g3 = build_graph(cfg(2, 3))
    idx = np.random.default_rng(1).choice(g3.n_edges, 50, replace=False)
    c = Circuit("edge", tuple(g3.edges[i] for i in idx))
    assert prune(c).member_set == naive_prune(c.members)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["edge", "node", "neuron"]), st.integers(0, 2**32 - 1))
def test_json_round_trip(granularity, seed):
    g = build_graph(cfg(2, 2))
    members = g.members(granularity)
    rng = np.random.default_rng(seed)
    chosen = [members[i] for i in rng.choice(len(members), size=min(7, len(members)), replace=False)]
    c = Circuit(granularity, tuple(chosen), scores={m: float(rng.normal()) for m in chosen},
                task_id="t", method="eap-ig", threshold=0.85, model_config_hash=g.config.hash(),
                provenance={"steps": 5})
    assert loads_circuit(dumps_circuit(c), g) == c


def test_empty_circuit_document():
    doc = circuit_to_json(Circuit("edge", ()))
    assert doc["members"] == [] and doc["version"] == 1


def test_reversed_edge_document_rejected():
    doc = circuit_to_json(Circuit("edge", ()))
    doc["members"] = [{"src": "logits", "dst": "input", "channel": "direct"}]
    with pytest.raises(ValueError):
        loads_circuit(json.dumps(doc))


def test_bad_version_and_kind_rejected():
    doc = circuit_to_json(Circuit("node", (NodeId("mlp", 0),)))
    with pytest.raises(CircuitFormatError):
        loads_circuit(json.dumps(dict(doc, version=2)))
    doc["members"] = [{"node": "attn7"}]
    with pytest.raises(ValueError):
        loads_circuit(json.dumps(doc))


def test_member_outside_host_graph_rejected():
    g = build_graph(cfg(1, 1))
    c = Circuit("node", (NodeId("mlp", 3),))
    with pytest.raises(CircuitFormatError):
        loads_circuit(dumps_circuit(c), g)


def test_node_names_round_trip():
    for n in build_graph(cfg(2, 2)).nodes:
        assert NodeId.parse(str(n)) == n
