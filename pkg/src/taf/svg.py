"""Dependency-free SVG rendering for matrices and segmentation bands."""

from __future__ import annotations

import colorsys
from xml.sax.saxutils import escape

import numpy as np

from .types import IGNORE


def _grey(v: float) -> str:
    c = int(round(255 * (1.0 - v)))
    return f"#{c:02x}{c:02x}{c:02x}"


def action_color(label: int) -> str:
    if label == IGNORE:
        return "#ffffff"
    # golden-ratio hue walk keeps neighbouring ids distinguishable
    h = (label * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.55, 0.9)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def heatmap(matrix, title: str = "", cell_w: float = 24.0, height: float = 400.0) -> str:
    """Render a (rows x cols) nonnegative matrix; rows run top to bottom."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    top = 24.0 if title else 4.0
    cell_h = height / rows
    scale = m.max() if m.max() > 0 else 1.0
    width = cols * cell_w + 8
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
             f'height="{height + top + 4:.0f}">']
    if title:
        parts.append(f'<text x="4" y="16" font-family="sans-serif" font-size="12">'
                     f'{escape(title)}</text>')
    for i in range(rows):
        for j in range(cols):
            parts.append(f'<rect x="{4 + j * cell_w:.2f}" y="{top + i * cell_h:.2f}" '
                         f'width="{cell_w:.2f}" height="{cell_h + 0.05:.2f}" '
                         f'fill="{_grey(m[i, j] / scale)}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def segmentation_bands(bands, width: float = 800.0, band_h: float = 28.0) -> str:
    """Stack framewise label sequences as coloured horizontal bands.

    ``bands`` is a list of ``(name, labels)`` pairs, e.g. ground truth above
    prediction.
    """
    label_w = 90.0
    height = len(bands) * (band_h + 6) + 6
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + label_w:.0f}" '
             f'height="{height:.0f}">']
    for row, (name, labels) in enumerate(bands):
        labels = np.asarray(labels)
        y = 6 + row * (band_h + 6)
        parts.append(f'<text x="4" y="{y + band_h * 0.65:.1f}" font-family="sans-serif" '
                     f'font-size="12">{escape(name)}</text>')
        n = len(labels)
        start = 0
        for i in range(1, n + 1):
            if i == n or labels[i] != labels[start]:
                x0 = label_w + width * start / n
                w = width * (i - start) / n
                parts.append(f'<rect x="{x0:.2f}" y="{y}" width="{w:.2f}" height="{band_h}" '
                             f'fill="{action_color(int(labels[start]))}">'
                             f'<title>{int(labels[start])}: {start}-{i - 1}</title></rect>')
                start = i
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
