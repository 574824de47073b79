"""Deterministic SVG scatter of prototype-branch embeddings.

Only the first two embedding coordinates are drawn. Each center gets a cross
and a circle of Euclidean radius ``sqrt(d * R)``, which is where the scaled
distance ``||f - C||^2 / d`` equals ``R``. Points are filled by decision
(class color, black for unknown, pale gray for filtered) and outlined by true
class.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .model import FILTERED, UNKNOWN

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
UNKNOWN_COLOR = "#000000"
FILTERED_COLOR = "#dddddd"


def _color(k: int) -> str:
    return PALETTE[k % len(PALETTE)]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def embedding_svg(embeddings, true_labels, decisions, centers, radius: float,
                  size: int = 600, margin: int = 40, title: str = "") -> str:
    emb = np.asarray(embeddings, dtype=np.float64)[:, :2]
    C = np.asarray(centers, dtype=np.float64)
    dim = C.shape[1]
    C2 = C[:, :2]
    r_euclid = math.sqrt(dim * radius)

    lo = np.minimum(emb.min(axis=0), (C2 - r_euclid).min(axis=0))
    hi = np.maximum(emb.max(axis=0), (C2 + r_euclid).max(axis=0))
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    scale = (size - 2 * margin) / span

    def px(p):
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{margin}" y="{margin // 2}" font-size="14">{escape(title)}</text>')
    out.append('<g id="points">')
    for p, t, dcs in zip(emb, true_labels, decisions):
        x, y = px(p)
        if dcs == UNKNOWN:
            fill = UNKNOWN_COLOR
        elif dcs == FILTERED:
            fill = FILTERED_COLOR
        else:
            fill = _color(int(dcs))
        stroke = UNKNOWN_COLOR if t < 0 else _color(int(t))
        out.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="{fill}" '
            f'stroke="{stroke}" stroke-width="1" fill-opacity="0.7"/>'
        )
    out.append("</g>")
    out.append('<g id="prototypes">')
    for k, c in enumerate(C2):
        x, y = px(c)
        col = _color(k)
        out.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r_euclid * scale)}" '
            f'fill="none" stroke="{col}" stroke-width="1.5" stroke-dasharray="4 3"/>'
        )
        out.append(
            f'<path d="M {_fmt(x - 6)} {_fmt(y - 6)} L {_fmt(x + 6)} {_fmt(y + 6)} '
            f'M {_fmt(x - 6)} {_fmt(y + 6)} L {_fmt(x + 6)} {_fmt(y - 6)}" '
            f'stroke="{col}" stroke-width="2.5"/>'
        )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
