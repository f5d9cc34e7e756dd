"""Minimal SVG heatmaps for trace grids and contribution profiles."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

LOW = (255, 255, 255)
HIGH = (178, 24, 43)


def _color(t: float) -> str:
    rgb = [round(lo + (hi - lo) * t) for lo, hi in zip(LOW, HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def render_svg(matrix: np.ndarray, row_labels: Sequence[str] | None = None,
               col_labels: Sequence[str] | None = None, title: str = "",
               cell: int = 18) -> str:
    """Heatmap of ``matrix`` on a linear white-to-red scale between its own
    minimum and maximum, with a legend showing both values."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if not np.isfinite(m).all():
        raise ValueError("matrix must be finite")
    n_rows, n_cols = m.shape
    row_labels = [str(i) for i in range(n_rows)] if row_labels is None else list(row_labels)
    col_labels = [str(j) for j in range(n_cols)] if col_labels is None else list(col_labels)
    if len(row_labels) != n_rows or len(col_labels) != n_cols:
        raise ValueError("label count does not match matrix shape")
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo
    left, top = 90, 30
    width = left + n_cols * cell + 20
    legend_y = top + n_rows * cell + 30
    height = legend_y + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="10">']
    if title:
        out.append(f'<text x="{left}" y="15">{escape(title)}</text>')
    for i in range(n_rows):
        y = top + i * cell
        out.append(f'<text x="{left - 4}" y="{y + cell * 0.7:.1f}" text-anchor="end">'
                   f'{escape(row_labels[i])}</text>')
        for j in range(n_cols):
            t = (m[i, j] - lo) / span if span > 0 else 0.0
            out.append(f'<rect x="{left + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{_color(t)}"><title>{_fmt(m[i, j])}</title></rect>')
    for j in range(n_cols):
        out.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{top + n_rows * cell + 12}" '
                   f'text-anchor="middle">{escape(col_labels[j])}</text>')
    out.append('<defs><linearGradient id="scale">'
               f'<stop offset="0" stop-color="{_color(0.0)}"/>'
               f'<stop offset="1" stop-color="{_color(1.0)}"/></linearGradient></defs>')
    bar_w = max(60, n_cols * cell)
    out.append(f'<rect x="{left}" y="{legend_y}" width="{bar_w}" height="10" fill="url(#scale)" '
               'stroke="#444" stroke-width="0.5"/>')
    out.append(f'<text x="{left}" y="{legend_y + 24}" class="legend-min">min {_fmt(lo)}</text>')
    out.append(f'<text x="{left + bar_w}" y="{legend_y + 24}" text-anchor="end" '
               f'class="legend-max">max {_fmt(hi)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
