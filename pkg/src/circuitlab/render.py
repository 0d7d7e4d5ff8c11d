"""Self-contained SVG output for similarity matrices, dendrograms and structure reports.

Heatmap colours interpolate linearly in RGB from white (low end of the scale)
to dark blue (high end).  The default scale is [0, 1]; values outside it are
clamped.  Output depends only on the input artifact, so bytes are stable.
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .compare import Dendrogram, SimilarityMatrix

LOW_RGB = (255, 255, 255)
HIGH_RGB = (8, 48, 107)
CELL = 44
FONT = "font-family=\"monospace\""


def colour(value: float, vmin: float = 0.0, vmax: float = 1.0) -> str:
    t = 0.0 if vmax == vmin else (value - vmin) / (vmax - vmin)
    t = min(1.0, max(0.0, t))
    rgb = [round(lo + t * (hi - lo)) for lo, hi in zip(LOW_RGB, HIGH_RGB)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _svg(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
            f'viewBox="0 0 {width:g} {height:g}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _text(x: float, y: float, s: str, size: int = 10, anchor: str = "start", extra: str = "") -> str:
    return (f'<text x="{x:g}" y="{y:g}" font-size="{size}" {FONT} text-anchor="{anchor}"{extra}>'
            f"{escape(s)}</text>")


def heatmap(values: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str] | None = None,
            families: Sequence[str] | None = None, title: str = "", vmin: float = 0.0,
            vmax: float = 1.0, fmt: str = "{:.2f}") -> str:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot render an empty matrix")
    col_labels = list(row_labels if col_labels is None else col_labels)
    n_rows, n_cols = values.shape
    pad = 8 + 7 * max(len(s) for s in list(row_labels) + col_labels)
    top = pad + (20 if title else 0)
    width = pad + n_cols * CELL + 10
    height = top + n_rows * CELL + 10
    body = []
    if title:
        body.append(_text(8, 16, title, 12))
    for j, lab in enumerate(col_labels):
        x = pad + j * CELL + CELL / 2
        body.append(_text(x, top - 6, lab, 10, "start", f' transform="rotate(-90 {x:g} {top - 6:g})"'))
    for i, lab in enumerate(row_labels):
        y = top + i * CELL
        body.append(_text(pad - 6, y + CELL / 2 + 4, lab, 10, "end"))
        for j in range(n_cols):
            v = values[i, j]
            x = pad + j * CELL
            fill = colour(v, vmin, vmax)
            ink = "#ffffff" if (v - vmin) > 0.55 * (vmax - vmin) else "#000000"
            body.append(f'<rect x="{x:g}" y="{y:g}" width="{CELL}" height="{CELL}" fill="{fill}" '
                        f'stroke="#999999" stroke-width="0.5"/>')
            body.append(_text(x + CELL / 2, y + CELL / 2 + 4, fmt.format(v), 10, "middle",
                              f' fill="{ink}"'))
    if families is not None:
        for i in range(1, len(families)):
            if families[i] != families[i - 1]:
                y = top + i * CELL
                x = pad + i * CELL
                body.append(f'<line class="divider" x1="{pad:g}" y1="{y:g}" x2="{pad + n_cols * CELL:g}" '
                            f'y2="{y:g}" stroke="#000000" stroke-width="2"/>')
                body.append(f'<line class="divider" x1="{x:g}" y1="{top:g}" x2="{x:g}" '
                            f'y2="{top + n_rows * CELL:g}" stroke="#000000" stroke-width="2"/>')
    return _svg(width, height, body)


def render_matrix(matrix: SimilarityMatrix, vmin: float = 0.0, vmax: float = 1.0) -> str:
    title = f"{matrix.metric} ({matrix.granularity})"
    return heatmap(matrix.values, matrix.task_ids, families=matrix.families, title=title,
                   vmin=vmin, vmax=vmax)


def render_dendrogram(dendro: Dendrogram, height: float = 220.0) -> str:
    """Merges as inverted-U links; link height is proportional to merge distance."""
    k = len(dendro.labels)
    if k == 0:
        raise ValueError("cannot render an empty dendrogram")
    order = dendro.leaf_order()
    step = 40
    label_h = 8 + 7 * max(len(s) for s in dendro.labels)
    width = 40 + step * k
    base = 20 + height
    top_d = max((m.distance for m in dendro.merges), default=0.0) or 1.0
    x = {leaf: 40 + step * pos for pos, leaf in enumerate(order)}
    y = {leaf: base for leaf in range(k)}
    body = [_text(8, 14, f"linkage: {dendro.linkage}", 11)]
    for idx, m in enumerate(dendro.merges):
        new = k + idx
        ym = base - height * m.distance / top_d
        xa, xb = x[m.a], x[m.b]
        body.append(f'<path class="link" d="M{xa:g},{y[m.a]:g} V{ym:g} H{xb:g} V{y[m.b]:g}" '
                    f'fill="none" stroke="#08306b" stroke-width="1.5"/>')
        x[new] = (xa + xb) / 2
        y[new] = ym
    for leaf in range(k):
        body.append(_text(x[leaf], base + 10, dendro.labels[leaf], 10, "start",
                          f' transform="rotate(90 {x[leaf]:g} {base + 10:g})"'))
    return _svg(width, base + label_h + 10, body)


def _bars(x0: float, y0: float, counts: Sequence[int], label: str, w: float = 200, h: float = 80) -> list[str]:
    out = [_text(x0, y0 - h - 6, label, 10)]
    top = max(max(counts, default=0), 1)
    bw = w / max(len(counts), 1)
    for i, c in enumerate(counts):
        bh = h * c / top
        out.append(f'<rect x="{x0 + i * bw:g}" y="{y0 - bh:g}" width="{bw - 1:g}" height="{bh:g}" '
                   f'fill="#2171b5"/>')
    out.append(f'<line x1="{x0:g}" y1="{y0:g}" x2="{x0 + w:g}" y2="{y0:g}" stroke="#000000"/>')
    out.append(_text(x0, y0 + 12, "0", 9))
    out.append(_text(x0 + w, y0 + 12, "1", 9, "end"))
    return out


def render_structure(report: dict) -> str:
    """Edge-type grid of the intersection circuit and its normalized-layer histograms."""
    grid = report["edge_type_grid"]
    kinds = grid["kinds"]
    counts = np.array(grid["counts"], dtype=float)
    hm = heatmap(counts, [f"from {k}" for k in kinds], [f"to {k}" for k in kinds],
                 title=f"intersection edges: {int(counts.sum())}", vmin=0.0,
                 vmax=max(float(counts.max()), 1.0), fmt="{:.0f}")
    inner = hm.split("\n")[1:-2]
    hm_w = float(hm.split('width="')[1].split('"')[0])
    hm_h = float(hm.split('height="')[1].split('"')[0])
    body = list(inner)
    body += _bars(hm_w + 20, 110, report["layers"]["start_hist"], "source layer / n_layers")
    body += _bars(hm_w + 20, 230, report["layers"]["end_hist"], "target layer / n_layers")
    return _svg(hm_w + 240, max(hm_h, 260), body)
