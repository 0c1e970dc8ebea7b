"""Minimal deterministic SVG line charts for curve CSVs.

Fixed 720x480 canvas, one line per policy with a shaded +-stderr band.
Output depends only on the input curves and labels.
"""

from __future__ import annotations

import math
from typing import Mapping
from xml.sax.saxutils import escape

import numpy as np

from .metrics import Curve

WIDTH, HEIGHT = 720, 480
MARGIN = dict(left=70, right=170, top=40, bottom=55)
# Okabe-Ito colour-blind safe palette, black last
PALETTE = ("#E69F00", "#56B4E9", "#009E73", "#F0E442", "#0072B2", "#D55E00", "#CC79A7", "#000000")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:g}"


def render(curves: Mapping[str, Curve], title: str = "", xlabel: str = "t", ylabel: str = "") -> str:
    if not curves:
        raise ValueError("nothing to plot: empty policy set")
    names = list(curves)
    xs = np.concatenate([np.asarray(curves[k].x, dtype=float) for k in names])
    lows, highs = [], []
    for k in names:
        c = curves[k]
        err = np.nan_to_num(np.asarray(c.y_err, dtype=float), nan=0.0)
        lows.append(np.min(c.y - err))
        highs.append(np.max(c.y + err))
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(min(lows)), float(max(highs))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]

    def px(x):
        return L + (x - x0) / (x1 - x0) * (R - L)

    def py(y):
        return B - (y - y0) / (y1 - y0) * (B - T)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    # axes and ticks
    out.append(f'<rect x="{L}" y="{T}" width="{R - L}" height="{B - T}" fill="none" stroke="#444444"/>')
    for v in _nice_ticks(x0, x1):
        X = px(v)
        out.append(f'<line x1="{_fmt(X)}" y1="{B}" x2="{_fmt(X)}" y2="{B + 5}" stroke="#444444"/>')
        out.append(f'<text x="{_fmt(X)}" y="{B + 18}" text-anchor="middle">{_label(v)}</text>')
    for v in _nice_ticks(y0, y1):
        Y = py(v)
        out.append(f'<line x1="{L - 5}" y1="{_fmt(Y)}" x2="{L}" y2="{_fmt(Y)}" stroke="#444444"/>')
        out.append(f'<line x1="{L}" y1="{_fmt(Y)}" x2="{R}" y2="{_fmt(Y)}" stroke="#eeeeee"/>')
        out.append(f'<text x="{L - 8}" y="{_fmt(Y + 4)}" text-anchor="end">{_label(v)}</text>')
    out.append(f'<text x="{(L + R) / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(T + B) / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(T + B) / 2:.2f})">{escape(ylabel)}</text>')

    for i, k in enumerate(names):
        c, color = curves[k], PALETTE[i % len(PALETTE)]
        x = np.asarray(c.x, dtype=float)
        y = np.asarray(c.y, dtype=float)
        e = np.asarray(c.y_err, dtype=float)
        ok = ~np.isnan(e)
        if ok.any():
            upper = [f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x[ok], (y + e)[ok])]
            lower = [f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x[ok][::-1], (y - e)[ok][::-1])]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = T + 14 + 18 * i
        out.append(f'<line x1="{R + 12}" y1="{ly}" x2="{R + 34}" y2="{ly}" stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="{R + 40}" y="{ly + 4}">{escape(k)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
