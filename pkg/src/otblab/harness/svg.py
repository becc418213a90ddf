"""Minimal deterministic SVG line and bar charts."""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 160, 40, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _num(x: float) -> str:
    return f"{x:.2f}"


def _tick(x: float) -> str:
    return f"{x:.4g}"


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2}" y="{HEIGHT - 10}" '
        f'text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{HEIGHT / 2}" text-anchor="middle" '
        f'transform="rotate(-90 15 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]


def _range(values: Sequence[float]) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if hi == lo:
        pad = abs(hi) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
               title: str = "", xlabel: str = "", ylabel: str = "", log_x: bool = False) -> str:
    """``series`` maps a label to ``(xs, ys)``; non-finite points are skipped."""
    tx = (lambda v: math.log2(v)) if log_x else (lambda v: v)
    xs_all = [tx(x) for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    x0, x1 = _range(xs_all)
    y0, y1 = _range(ys_all)
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (tx(x) - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = _frame(title, xlabel, ylabel)
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for k in range(5):
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{MARGIN_L - 5}" y="{_num(py(yv) + 4)}" text-anchor="end">{_tick(yv)}</text>')
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        label = 2 ** xv if log_x else xv
        xpix = MARGIN_L + (xv - x0) / (x1 - x0) * pw
        out.append(f'<text x="{_num(xpix)}" y="{MARGIN_T + ph + 15}" text-anchor="middle">{_tick(label)}</text>')
    for idx, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in zip(xs, ys) if math.isfinite(y))
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN_T + 15 * idx + 10
        out.append(f'<line x1="{WIDTH - MARGIN_R + 10}" y1="{ly}" x2="{WIDTH - MARGIN_R + 30}" '
                   f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - MARGIN_R + 35}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: Mapping[str, float], title: str = "", ylabel: str = "") -> str:
    labels = list(values)
    ys = [values[k] for k in labels]
    lo, hi = _range([0.0] + ys)
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def py(y):
        return MARGIN_T + (1.0 - (y - lo) / (hi - lo)) * ph

    out = _frame(title, "", ylabel)
    out.append(f'<line x1="{MARGIN_L}" y1="{_num(py(0.0))}" x2="{MARGIN_L + pw}" y2="{_num(py(0.0))}" stroke="black"/>')
    for k in range(5):
        yv = lo + (hi - lo) * k / 4
        out.append(f'<text x="{MARGIN_L - 5}" y="{_num(py(yv) + 4)}" text-anchor="end">{_tick(yv)}</text>')
    slot = pw / max(len(labels), 1)
    for i, (label, y) in enumerate(zip(labels, ys)):
        if not math.isfinite(y):
            continue
        top, bottom = sorted((py(y), py(0.0)))
        x = MARGIN_L + i * slot + slot * 0.15
        out.append(f'<rect x="{_num(x)}" y="{_num(top)}" width="{_num(slot * 0.7)}" '
                   f'height="{_num(bottom - top)}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{_num(x + slot * 0.35)}" y="{MARGIN_T + ph + 15}" '
                   f'text-anchor="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
