"""SVG charts for sweep results.

The bar chart draws one ``<g class="bar-group">`` per patch with an
``mF1_camo`` and an ``F1_patch`` bar, plus a single ``baseline`` line.
The scatter chart has one panel per sweep axis (size, alpha) with a
point per patch for detection score and for mF1 reduction.
"""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

CAMO_COLOR = "#3b6fb6"
PATCH_COLOR = "#e08a2c"
BASELINE_COLOR = "#2e9e4f"


def _svg(width: int, height: int, body: list) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def bar_chart(rows: Sequence, baseline: float, title: str = "Detection performance per patch") -> str:
    n = len(rows)
    left, right, top, bottom = 50, 20, 30, 140
    group_w = 28
    width = left + right + max(1, n) * group_w
    height = 420
    plot_h = height - top - bottom

    def y(v):
        return top + plot_h * (1.0 - max(0.0, min(1.0, v)))

    body = [f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
            f'<line class="axis" x1="{left}" y1="{top + plot_h}" x2="{width - right}" y2="{top + plot_h}" stroke="black"/>']
    for k in range(6):
        v = k / 5
        body.append(f'<text x="{left - 6}" y="{y(v) + 3:.1f}" text-anchor="end">{v:.1f}</text>')
    bar_w = (group_w - 6) / 2
    for i, r in enumerate(rows):
        x0 = left + i * group_w + 3
        body.append(f'<g class="bar-group" data-name="{escape(r.name)}">')
        for j, (cls, value, color) in enumerate((("camo", r.mF1_camo, CAMO_COLOR), ("patch", r.F1_patch, PATCH_COLOR))):
            yv = y(value)
            body.append(f'  <rect class="bar {cls}" x="{x0 + j * bar_w:.1f}" y="{yv:.1f}" width="{bar_w:.1f}" '
                        f'height="{top + plot_h - yv:.1f}" fill="{color}"/>')
        lx, ly = x0 + bar_w, top + plot_h + 8
        body.append(f'  <text x="{lx:.1f}" y="{ly}" text-anchor="end" transform="rotate(-60 {lx:.1f} {ly})">'
                    f'{escape(r.name)}</text>')
        body.append("</g>")
    if baseline is not None and not math.isnan(baseline):
        body.append(f'<line class="baseline" x1="{left}" y1="{y(baseline):.1f}" x2="{width - right}" '
                    f'y2="{y(baseline):.1f}" stroke="{BASELINE_COLOR}" stroke-width="2"/>')
    lx = left + 10
    for k, (label, color) in enumerate((("mF1 camo", CAMO_COLOR), ("F1 patch", PATCH_COLOR),
                                        ("baseline mF1", BASELINE_COLOR))):
        body.append(f'<rect class="legend" x="{lx + k * 90}" y="{height - 18}" width="10" height="10" fill="{color}"/>')
        body.append(f'<text x="{lx + k * 90 + 14}" y="{height - 9}">{label}</text>')
    return _svg(width, height, body)


def scatter_chart(rows: Sequence) -> str:
    panel_w, panel_h, pad = 260, 220, 45
    width, height = 2 * panel_w + 3 * pad, panel_h + 2 * pad + 20
    body = []
    for p, (axis, label) in enumerate((("size_fraction", "size fraction"), ("alpha", "alpha"))):
        ox, oy = pad + p * (panel_w + pad), pad
        xs = [getattr(r, axis) for r in rows]
        lo, hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
        if hi - lo < 1e-9:
            lo, hi = lo - 0.05, hi + 0.05

        def px(v):
            return ox + panel_w * (v - lo) / (hi - lo)

        def py(v):
            return oy + panel_h * (1.0 - max(0.0, min(1.0, v)))

        body.append(f'<g class="panel" data-axis="{axis}">')
        body.append(f'  <rect x="{ox}" y="{oy}" width="{panel_w}" height="{panel_h}" fill="none" stroke="black"/>')
        body.append(f'  <text x="{ox + panel_w / 2}" y="{oy + panel_h + 30}" text-anchor="middle">{label}</text>')
        body.append(f'  <text x="{ox + 2}" y="{oy - 6}">{lo:.2f}</text>')
        body.append(f'  <text x="{ox + panel_w}" y="{oy - 6}" text-anchor="end">{hi:.2f}</text>')
        for r in rows:
            x = px(getattr(r, axis))
            body.append(f'  <circle class="point detection" cx="{x:.1f}" cy="{py(r.detection_score):.1f}" r="3" '
                        f'fill="{PATCH_COLOR}"><title>{escape(r.name)}</title></circle>')
            if not math.isnan(r.mF1_reduction_pct):
                body.append(f'  <circle class="point reduction" cx="{x:.1f}" cy="{py(r.mF1_reduction_pct / 100):.1f}" '
                            f'r="3" fill="{CAMO_COLOR}"><title>{escape(r.name)}</title></circle>')
        body.append("</g>")
    body.append(f'<text x="{pad}" y="{height - 8}">orange: detection score, blue: mF1 reduction / 100</text>')
    return _svg(width, height, body)
