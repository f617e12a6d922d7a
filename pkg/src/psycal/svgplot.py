"""Minimal line-chart SVG writer. CSV files stay the source of truth; these
pictures are only for a quick look."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f")


def line_chart(series, title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 720, height: int = 400, markers=None) -> str:
    """Render ``series`` (a list of ``(label, x, y)``) as an SVG document.

    ``markers`` is an optional list of ``(label, x, y)`` point sets drawn as
    circles. Non-finite values are skipped.
    """
    markers = markers or []
    pad_l, pad_r, pad_t, pad_b = 60, 150, 30, 45
    xs = [np.asarray(x, float) for _, x, _ in series + markers]
    ys = [np.asarray(y, float) for _, _, y in series + markers]
    allx = np.concatenate([a[np.isfinite(a)] for a in xs]) if xs else np.zeros(1)
    ally = np.concatenate([a[np.isfinite(a)] for a in ys]) if ys else np.zeros(1)
    if allx.size == 0:
        allx = np.zeros(1)
    if ally.size == 0:
        ally = np.zeros(1)
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def py(y):
        return pad_t + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<text x="{pad_l + pw / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
           f'<text x="14" y="{pad_t + ph / 2:.0f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {pad_t + ph / 2:.0f})">{escape(ylabel)}</text>']
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        out.append(f'<text x="{pad_l - 4}" y="{py(yv) + 4:.1f}" text-anchor="end" font-size="10">{yv:.4g}</text>')
        out.append(f'<text x="{px(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle" font-size="10">{xv:.4g}</text>')

    items = [(lab, x, y, False) for lab, x, y in series] + [(lab, x, y, True) for lab, x, y in markers]
    for i, (label, x, y, dots) in enumerate(items):
        colour = PALETTE[i % len(PALETTE)]
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        if dots:
            for a, b in zip(x[ok], y[ok]):
                out.append(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="3" fill="{colour}"/>')
        else:
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[ok], y[ok]))
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{pts}"/>')
        ly = pad_t + 14 + 16 * i
        out.append(f'<rect x="{width - pad_r + 10}" y="{ly - 8}" width="10" height="10" fill="{colour}"/>')
        out.append(f'<text x="{width - pad_r + 24}" y="{ly + 1}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
