from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from circuitlab.compare import Dendrogram, Merge, SimilarityMatrix
from circuitlab.render import colour, heatmap, render_dendrogram, render_matrix, render_structure

NS = "{http://www.w3.org/2000/svg}"


def parse(svg: str):
    return ET.fromstring(svg)


def test_colour_scale_endpoints():
    assert colour(0.0) == "#ffffff"
    assert colour(1.0) == "#08306b"
    assert colour(2.0) == colour(1.0) and colour(-1.0) == colour(0.0)


def test_one_by_one_matrix():
    m = SimilarityMatrix(("only",), ("formal",), np.array([[0.5]]), "iou")
    root = parse(render_matrix(m))
    rects = root.findall(f"{NS}rect")
    assert len(rects) == 1 and rects[0].get("fill") == colour(0.5)
    assert "0.50" in [t.text for t in root.iter(f"{NS}text")]


def test_family_dividers_drawn_at_boundary():
    v = np.eye(3)
    m = SimilarityMatrix(("a", "b", "c"), ("formal", "formal", "functional"), v, "iou")
    root = parse(render_matrix(m))
    assert len([e for e in root.iter(f"{NS}line") if e.get("class") == "divider"]) == 2
    assert len(root.findall(f"{NS}rect")) == 9


def test_three_leaf_dendrogram():
    d = Dendrogram(("x", "y", "z"), (Merge(0, 1, 1.0, 2), Merge(2, 3, 4.0, 3)), "average")
    root = parse(render_dendrogram(d))
    links = [p for p in root.iter(f"{NS}path") if p.get("class") == "link"]
    assert len(links) == 2
    labels = [t.text for t in root.iter(f"{NS}text")]
    assert {"x", "y", "z"} <= set(labels)


def test_rendering_is_deterministic():
    m = SimilarityMatrix(("a", "b"), ("formal", "functional"), np.array([[1.0, 0.25], [0.25, 1.0]]), "iou")
    assert render_matrix(m).encode() == render_matrix(m).encode()


def test_labels_are_escaped():
    root = parse(heatmap(np.zeros((1, 1)), ["a<b&c"]))
    assert "a<b&c" in [t.text for t in root.iter(f"{NS}text")]


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        heatmap(np.zeros((0, 0)), [])
    with pytest.raises(ValueError):
        render_dendrogram(Dendrogram((), (), "average"))


def test_structure_figure_parses():
    report = {"edge_type_grid": {"kinds": ["input", "head", "mlp", "logits"], "counts": np.eye(4, dtype=int).tolist()},
              "layers": {"start_hist": [1] + [0] * 9, "end_hist": [0] * 9 + [2]}}
    root = parse(render_structure(report))
    assert len(root.findall(f"{NS}rect")) == 16 + 20
