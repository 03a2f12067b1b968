"""Deterministic standalone SVG plots: sorted max-ratio curves with the base
range band, ``-log10(ratio)`` histograms with the fitted gamma density,
MA heatmaps and loss curves.

Coordinates are written with two decimals so identical inputs give
identical bytes.
"""

from __future__ import annotations

import math
import os
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .graphs import atomic_write_text

PANEL_W, PANEL_H = 320.0, 220.0
MARGIN = 40.0
BAND_COLOR = "#f5a623"
LINE_COLOR = "#1f4e9c"
FIT_COLOR = "#c0392b"
SERIES_COLORS = ("#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad")


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Svg:
    def __init__(self, width: float, height: float):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def add(self, s: str):
        self.parts.append(s)

    def rect(self, x, y, w, h, fill, opacity=1.0, stroke="none"):
        self.add(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
                 f'fill="{fill}" fill-opacity="{opacity:.2f}" stroke="{stroke}"/>')

    def line(self, x1, y1, x2, y2, stroke="#000", dash=None, width=1.0):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                 f'stroke="{stroke}" stroke-width="{width:.2f}"{d}/>')

    def polyline(self, xs, ys, stroke, width=1.5):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.add(f'<polyline points="{pts}" fill="none" stroke="{stroke}" '
                 f'stroke-width="{width:.2f}"/>')

    def circle(self, x, y, r, fill):
        self.add(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}"/>')

    def text(self, x, y, s, size=11, anchor="start"):
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" font-size="{size}" '
                 f'text-anchor="{anchor}">{escape(str(s))}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(self.width)}" '
                f'height="{_f(self.height)}" viewBox="0 0 {_f(self.width)} {_f(self.height)}">')
        return "\n".join([head, f'<rect width="100%" height="100%" fill="#fff"/>',
                          *self.parts, "</svg>"]) + "\n"


class _Axes:
    """Linear map from data ranges to one panel's pixel box."""

    def __init__(self, svg: _Svg, x0, y0, xlim, ylim, title="", xlabel="", ylabel="",
                 pw=PANEL_W, ph=PANEL_H):
        self.svg = svg
        self.left, self.top = x0 + MARGIN, y0 + 20.0
        self.w, self.h = pw - MARGIN - 10.0, ph - 20.0 - MARGIN
        lo, hi = xlim
        self.xlim = (lo, hi if hi > lo else lo + 1.0)
        lo, hi = ylim
        self.ylim = (lo, hi if hi > lo else lo + 1.0)
        svg.rect(self.left, self.top, self.w, self.h, "none", stroke="#444")
        svg.text(self.left + self.w / 2, y0 + 14.0, title, 12, "middle")
        svg.text(self.left + self.w / 2, self.top + self.h + 30.0, xlabel, 10, "middle")
        svg.text(x0 + 4.0, self.top - 6.0, ylabel, 10)
        for v, anchor_y in ((self.ylim[0], self.top + self.h), (self.ylim[1], self.top + 8.0)):
            svg.text(self.left - 3.0, anchor_y, f"{v:.3g}", 9, "end")
        for v, ax in ((self.xlim[0], self.left), (self.xlim[1], self.left + self.w)):
            svg.text(ax, self.top + self.h + 12.0, f"{v:.3g}", 9, "middle")

    def x(self, v):
        lo, hi = self.xlim
        return self.left + (np.asarray(v, dtype=float) - lo) / (hi - lo) * self.w

    def y(self, v):
        lo, hi = self.ylim
        return self.top + self.h - (np.asarray(v, dtype=float) - lo) / (hi - lo) * self.h


def _grid(n: int, cols: int = 2):
    cols = max(1, min(cols, n))
    rows = max(1, math.ceil(n / cols))
    return cols, rows, _Svg(cols * PANEL_W, rows * PANEL_H)


def svg_ratio_curves(curves: Sequence) -> str:
    """One panel per layer: trained per-batch max ratios sorted ascending
    (log10 axis) over a shaded band spanning the base model's range."""
    cols, _, svg = _grid(len(curves))
    for k, c in enumerate(curves):
        vals = np.log10(np.maximum(np.asarray(c.sorted_ratios, dtype=float), 1e-300))
        lo_b, hi_b = math.log10(max(c.base_min, 1e-300)), math.log10(max(c.base_max, 1e-300))
        ymin = min(float(vals.min()) if vals.size else lo_b, lo_b)
        ymax = max(float(vals.max()) if vals.size else hi_b, hi_b)
        pad = 0.05 * (ymax - ymin or 1.0)
        ax = _Axes(svg, (k % cols) * PANEL_W, (k // cols) * PANEL_H,
                   (0, max(len(vals) - 1, 1)), (ymin - pad, ymax + pad),
                   f"layer {c.layer} ({c.exceedances} above base)", "batch rank",
                   "log10 max ratio")
        svg.rect(ax.left, float(ax.y(hi_b)), ax.w, float(ax.y(lo_b) - ax.y(hi_b)),
                 BAND_COLOR, 0.35)
        xs = ax.x(np.arange(len(vals)))
        ys = ax.y(vals)
        if len(vals) > 1:
            svg.polyline(xs, ys, LINE_COLOR)
        for x, y in zip(xs, ys):
            svg.circle(x, y, 1.5, LINE_COLOR)
    return svg.render()


def svg_histogram(dist) -> str:
    """Histogram of ``-log10(ratio)`` with the gamma pdf rescaled to counts
    and a dashed line at the MA boundary."""
    svg = _Svg(PANEL_W * 1.5, PANEL_H * 1.3)
    edges = np.asarray(dist.bin_edges, dtype=float)
    counts = np.asarray(dist.counts, dtype=float)
    width = edges[1] - edges[0]
    xs = np.linspace(edges[0], edges[-1], 200)
    scaled = np.zeros_like(xs)
    if dist.fit is not None:
        scaled = dist.fit.pdf(xs) * (dist.n - dist.num_zero) * width
    xlo = min(edges[0], dist.boundary)
    xhi = max(edges[-1], dist.boundary)
    ymax = max(float(counts.max()), float(scaled.max()), 1.0) * 1.05
    ax = _Axes(svg, 0, 0, (xlo, xhi), (0, ymax), f"layer {dist.layer}", "-log10(ratio)", "count",
               svg.width, svg.height)
    for i, c in enumerate(counts):
        if c > 0:
            x0, x1 = float(ax.x(edges[i])), float(ax.x(edges[i + 1]))
            svg.rect(x0, float(ax.y(c)), max(x1 - x0, 0.5), float(ax.y(0) - ax.y(c)), LINE_COLOR, 0.6)
    if dist.fit is not None:
        svg.polyline(ax.x(xs), ax.y(scaled), FIT_COLOR)
        svg.text(ax.left + ax.w - 4.0, ax.top + 14.0,
                 f"gamma a={dist.fit.shape:.3g} KS={dist.ks:.3g}", 10, "end")
    bx = float(ax.x(dist.boundary))
    svg.line(bx, ax.top, bx, ax.top + ax.h, "#000", dash="4,3")
    svg.text(bx + 3.0, ax.top + 26.0, f"t={dist.boundary:g}", 10)
    return svg.render()


def _heat_color(pct: float) -> str:
    v = int(round(255 * (1.0 - min(max(pct, 0.0), 100.0) / 100.0)))
    return f"#ff{v:02x}{v:02x}"


def svg_heatmaps(tables: Sequence, title: str = "") -> str:
    """One panel per edge type; cell shade is the flagged percentage."""
    cols, _, svg = _grid(len(tables), cols=3)
    for k, tb in enumerate(tables):
        x0, y0 = (k % cols) * PANEL_W, (k // cols) * PANEL_H
        h, d = tb.percentages.shape
        cw = (PANEL_W - MARGIN - 10.0) / d
        ch = (PANEL_H - 20.0 - MARGIN) / h
        label = f"{title} type {tb.edge_type} (n={tb.edge_count}, mass={tb.mass:.3g})".strip()
        svg.text(x0 + PANEL_W / 2, y0 + 14.0, label, 11, "middle")
        for i in range(h):
            svg.text(x0 + MARGIN - 3.0, y0 + 20.0 + (i + 0.8) * ch, str(i), 8, "end")
            for j in range(d):
                svg.rect(x0 + MARGIN + j * cw, y0 + 20.0 + i * ch, cw, ch,
                         _heat_color(float(tb.percentages[i, j])), stroke="#ddd")
        svg.text(x0 + MARGIN + (PANEL_W - MARGIN) / 2, y0 + PANEL_H - 22.0, "dimension", 10, "middle")
    return svg.render()


def svg_loss_curves(histories: Mapping[str, Sequence[dict]], key: str = "train_loss") -> str:
    svg = _Svg(PANEL_W * 1.5, PANEL_H * 1.3)
    series = {name: np.array([r[key] for r in h], dtype=float) for name, h in histories.items()}
    allv = np.concatenate([v[np.isfinite(v)] for v in series.values()] or [np.zeros(1)])
    n = max(len(v) for v in series.values()) if series else 1
    ax = _Axes(svg, 0, 0, (0, max(n - 1, 1)), (0, float(allv.max()) * 1.05 if allv.size else 1.0),
               key.replace("_", " "), "epoch", "loss", svg.width, svg.height)
    for k, (name, v) in enumerate(series.items()):
        color = SERIES_COLORS[k % len(SERIES_COLORS)]
        ok = np.isfinite(v)
        svg.polyline(ax.x(np.arange(len(v))[ok]), ax.y(v[ok]), color)
        svg.rect(ax.left + 8.0, ax.top + 14.0 * k + 6.0, 10.0, 3.0, color)
        svg.text(ax.left + 22.0, ax.top + 14.0 * k + 11.0, name, 10)
    return svg.render()


def emit_svg_plots(report, out_dir) -> list[str]:
    """Write ``curves.svg`` (when the report carries base comparisons) and
    one ``hist_layer{l}.svg`` per layer.  Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    curves = [lr.curve for lr in report.layers if lr.curve is not None]
    if curves:
        paths.append(os.path.join(out_dir, "curves.svg"))
        atomic_write_text(paths[-1], svg_ratio_curves(curves))
    for lr in report.layers:
        paths.append(os.path.join(out_dir, f"hist_layer{lr.layer}.svg"))
        atomic_write_text(paths[-1], svg_histogram(lr.distribution))
    return paths
