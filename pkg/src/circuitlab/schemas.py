"""JSON schemas for every emitted artifact, checked before anything is written."""

from __future__ import annotations

import jsonschema

_NUM = {"type": "number"}
_NULLABLE_NUM = {"type": ["number", "null"]}
_STR = {"type": "string"}
_INT = {"type": "integer", "minimum": 0}

_EDGE_MEMBER = {
    "type": "object",
    "required": ["src", "dst", "channel"],
    "properties": {"src": _STR, "dst": _STR, "channel": {"enum": ["q", "k", "v", "direct"]},
                   "score": _NUM},
    "additionalProperties": False,
}
_NODE_MEMBER = {
    "type": "object", "required": ["node"],
    "properties": {"node": _STR, "score": _NUM}, "additionalProperties": False,
}
_NEURON_MEMBER = {
    "type": "object", "required": ["node", "dim"],
    "properties": {"node": _STR, "dim": _INT, "score": _NUM}, "additionalProperties": False,
}

CIRCUIT = {
    "type": "object",
    "required": ["version", "granularity", "model_config_hash", "task_id", "method", "threshold",
                 "members"],
    "properties": {
        "version": {"const": 1},
        "granularity": {"enum": ["edge", "node", "neuron"]},
        "model_config_hash": _STR, "task_id": _STR, "method": _STR,
        "threshold": _NULLABLE_NUM, "qkv_split": {"type": "boolean"},
        "provenance": {"type": "object"},
        "members": {"type": "array", "items": {"anyOf": [_EDGE_MEMBER, _NEURON_MEMBER, _NODE_MEMBER]}},
    },
}

SCORE_TABLE = {
    "type": "object",
    "required": ["granularity", "method", "steps", "n_examples", "scores"],
    "properties": {
        "granularity": {"enum": ["edge", "node", "neuron"]},
        "method": {"enum": ["eap", "eap-ig", "exact"]},
        "steps": {"type": ["integer", "null"]},
        "n_examples": _INT, "task_id": _STR,
        "scores": {"type": "array", "items": {
            "type": "object", "required": ["member", "value"],
            "properties": {"member": {"type": "object"}, "value": _NUM}}},
    },
}

FAITHFULNESS = {
    "type": "object",
    "required": ["task", "m", "m_null", "m_circuit", "F", "n_members", "fraction_of_graph"],
    "properties": {"task": _STR, "m": _NUM, "m_null": _NUM, "m_circuit": _NUM, "F": _NUM,
                   "n_members": _INT, "fraction_of_graph": {"type": "number", "minimum": 0, "maximum": 1}},
    "additionalProperties": False,
}

MATRIX = {
    "type": "object",
    "required": ["metric", "granularity", "task_ids", "families", "values", "summary"],
    "properties": {
        "metric": {"enum": ["iou", "recall", "cross_faithfulness", "mean"]},
        "granularity": _STR,
        "task_ids": {"type": "array", "items": _STR},
        "families": {"type": "array", "items": {"enum": ["formal", "functional"]}},
        "values": {"type": "array", "items": {"type": "array", "items": _NUM}},
        "summary": {"type": "object", "additionalProperties": _NULLABLE_NUM},
    },
}

DENDROGRAM = {
    "type": "object",
    "required": ["linkage", "labels", "merges"],
    "properties": {
        "linkage": {"enum": ["average", "complete", "ward"]},
        "labels": {"type": "array", "items": _STR},
        "merges": {"type": "array", "items": {
            "type": "object", "required": ["a", "b", "distance", "size"],
            "properties": {"a": _INT, "b": _INT, "distance": {"type": "number", "minimum": 0},
                           "size": {"type": "integer", "minimum": 2}}}},
    },
}

BASELINE = {
    "type": "object",
    "required": ["population", "lognormal", "tasks", "pairs"],
    "properties": {
        "population": _INT,
        "tasks": {"type": "array", "items": {
            "type": "object",
            "required": ["task", "mean_dummy_iou", "replicates", "seed", "target_size"],
            "properties": {"mean_dummy_iou": _NULLABLE_NUM, "replicates": _INT, "seed": {"type": "integer"}}}},
        "pairs": {"type": "array", "items": {
            "type": "object", "required": ["a", "b", "iou", "hypergeom_tail"],
            "properties": {"iou": {"type": "number", "minimum": 0, "maximum": 1},
                           "hypergeom_tail": {"type": "number", "minimum": 0, "maximum": 1}}}},
    },
}

STRUCTURE = {
    "type": "object",
    "required": ["task_ids", "intersection", "edge_type_grid", "layers", "exclusion"],
    "properties": {
        "intersection": {"type": "array", "items": _EDGE_MEMBER},
        "edge_type_grid": {"type": "object", "required": ["kinds", "counts"]},
        "layers": {"type": "object", "required": ["bins", "start", "end", "start_hist", "end_hist"],
                   "properties": {"start": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                                  "end": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}}}},
        "exclusion": {"type": "object"},
    },
}

EVALUATION = {
    "type": "object",
    "required": ["tasks"],
    "properties": {"tasks": {"type": "array", "items": {
        "type": "object", "required": ["task", "family", "accuracy", "m", "m_null"],
        "properties": {"accuracy": {"type": "number", "minimum": 0, "maximum": 1}}}}},
}

MANIFEST = {
    "type": "object",
    "required": ["status", "failed", "artifacts", "config"],
    "properties": {
        "status": {"enum": ["ok", "config-error", "stage-error"]},
        "failed": {"type": "boolean"},
        "error": {"type": ["object", "null"]},
        "created": _STR,
        "artifacts": {"type": "array", "items": {
            "type": "object", "required": ["path", "sha256", "kind"],
            "properties": {"path": _STR, "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                           "kind": _STR}}},
    },
}

SCHEMAS = {
    "circuit": CIRCUIT, "scores": SCORE_TABLE, "faithfulness": FAITHFULNESS, "matrix": MATRIX,
    "dendrogram": DENDROGRAM, "baseline": BASELINE, "structure": STRUCTURE,
    "evaluation": EVALUATION, "manifest": MANIFEST,
}


def validate(doc: dict, kind: str) -> None:
    """Raise jsonschema.ValidationError if doc does not match the named schema."""
    jsonschema.validate(doc, SCHEMAS[kind])
