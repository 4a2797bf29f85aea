"""Deterministic SVG rendering for traces and error-grid scatters.

SVGs are assembled from fixed-format strings (two decimal places
everywhere) so identical inputs always produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import PredictionTrace, ScoredPoint

LABEL_COLORS = {"AP": "#2a9d3f", "BE": "#e3a92b", "EP": "#d43d3d"}


class SvgCanvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]

    def line(self, x1, y1, x2, y2, color="#888888", width=1.0, dash=None):
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{color}" stroke-width="{width:.2f}"{dash_attr}/>')

    def polyline(self, points, color, width=1.5):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{width:.2f}"/>')

    def circle(self, x, y, r, color):
        self.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{color}"/>')

    def text(self, x, y, content, size=12, color="#222222", anchor="start"):
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="monospace" '
            f'fill="{color}" text-anchor="{anchor}">{content}</text>')

    def save(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.parts + ["</svg>"]), encoding="utf-8")


class _Axes:
    """Maps data coordinates into a margin-padded SVG viewport."""

    def __init__(self, canvas: SvgCanvas, x_range, y_range, margin=45):
        self.canvas = canvas
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.margin = margin
        self.plot_w = canvas.width - 2 * margin
        self.plot_h = canvas.height - 2 * margin

    def x(self, v) -> float:
        return self.margin + (v - self.x0) / (self.x1 - self.x0) * self.plot_w

    def y(self, v) -> float:
        return self.canvas.height - self.margin - (v - self.y0) / (self.y1 - self.y0) * self.plot_h

    def frame(self, x_label: str, y_label: str, ticks_x, ticks_y):
        c = self.canvas
        m = self.margin
        c.line(m, c.height - m, c.width - m, c.height - m, color="#333333")
        c.line(m, m, m, c.height - m, color="#333333")
        for t in ticks_x:
            c.line(self.x(t), c.height - m, self.x(t), c.height - m + 4, color="#333333")
            c.text(self.x(t), c.height - m + 16, f"{t:g}", size=10, anchor="middle")
        for t in ticks_y:
            c.line(m - 4, self.y(t), m, self.y(t), color="#333333")
            c.text(m - 6, self.y(t) + 3, f"{t:g}", size=10, anchor="end")
        c.text(c.width / 2, c.height - 8, x_label, size=11, anchor="middle")
        c.text(12, m - 10, y_label, size=11)

    def clipped(self, vx, vy) -> tuple[float, float]:
        vx = min(max(vx, self.x0), self.x1)
        vy = min(max(vy, self.y0), self.y1)
        return self.x(vx), self.y(vy)


def render_trace_svg(trace: PredictionTrace, path: str | Path, title: str = "") -> None:
    """One day (or trace slice) of predictions vs ground truth."""
    canvas = SvgCanvas(860, 420)
    n = len(trace)
    lo = min(40.0, float(np.min(trace.y_true)), float(np.min(trace.y_pred)))
    hi = max(240.0, float(np.max(trace.y_true)), float(np.max(trace.y_pred)))
    axes = _Axes(canvas, (0, max(n - 1, 1)), (lo - 10, hi + 10))
    hours = [i for i in range(0, n, 36)]
    glucose_ticks = [t for t in (50, 100, 150, 200, 250, 300, 350, 400) if lo - 10 <= t <= hi + 10]
    axes.frame("5-minute steps", "glucose (mg/dL)", hours, glucose_ticks)
    for level, dash in ((70, "4,4"), (180, "4,4")):
        if lo - 10 <= level <= hi + 10:
            canvas.line(axes.x(0), axes.y(level), axes.x(max(n - 1, 1)), axes.y(level),
                        color="#bbbbbb", dash=dash)
    for seg in trace.segments():
        canvas.polyline([axes.clipped(i, trace.y_true[i]) for i in seg], "#1f5fa8", 1.6)
        canvas.polyline([axes.clipped(i, trace.y_pred[i]) for i in seg], "#d43d3d", 1.6)
    canvas.text(axes.margin + 6, axes.margin + 6, "true", size=11, color="#1f5fa8")
    canvas.text(axes.margin + 50, axes.margin + 6, "predicted", size=11, color="#d43d3d")
    if title:
        canvas.text(canvas.width / 2, 20, title, size=13, anchor="middle")
    canvas.save(path)


def render_p_ega_svg(points: list[ScoredPoint], path: str | Path, title: str = "P-EGA") -> None:
    """Reference vs predicted glucose, colored by CG-EGA label."""
    canvas = SvgCanvas(520, 520)
    axes = _Axes(canvas, (0, 400), (0, 400))
    ticks = [0, 100, 200, 300, 400]
    axes.frame("reference glucose (mg/dL)", "predicted glucose (mg/dL)", ticks, ticks)
    canvas.line(axes.x(0), axes.y(0), axes.x(400), axes.y(400), color="#cccccc")
    # static zone boundary sketch (zero-rate grid): A-zone 20% band and hypo square
    band = [(g, 1.2 * g) for g in range(0, 340, 20)]
    canvas.polyline([axes.clipped(x, y) for x, y in band], "#bbbbbb", 0.8)
    band = [(g, 0.8 * g) for g in range(0, 401, 20)]
    canvas.polyline([axes.clipped(x, y) for x, y in band], "#bbbbbb", 0.8)
    canvas.line(axes.x(70), axes.y(0), axes.x(70), axes.y(400), color="#dddddd", dash="3,3")
    canvas.line(axes.x(180), axes.y(0), axes.x(180), axes.y(400), color="#dddddd", dash="3,3")
    for p in points:
        x, y = axes.clipped(p.y_true, p.y_pred)
        canvas.circle(x, y, 2.2, LABEL_COLORS[p.label])
    canvas.text(canvas.width / 2, 20, title, size=13, anchor="middle")
    _legend(canvas)
    canvas.save(path)


def render_r_ega_svg(points: list[ScoredPoint], path: str | Path, title: str = "R-EGA") -> None:
    """Reference vs predicted rate of change, colored by CG-EGA label."""
    canvas = SvgCanvas(520, 520)
    axes = _Axes(canvas, (-4, 4), (-4, 4))
    ticks = [-4, -2, 0, 2, 4]
    axes.frame("reference rate (mg/dL/min)", "predicted rate (mg/dL/min)", ticks, ticks)
    canvas.line(axes.x(-4), axes.y(-4), axes.x(4), axes.y(4), color="#cccccc")
    canvas.polyline([axes.clipped(v, v + 1) for v in (-4, 4)], "#bbbbbb", 0.8)
    canvas.polyline([axes.clipped(v, v - 1) for v in (-4, 4)], "#bbbbbb", 0.8)
    for p in points:
        x, y = axes.clipped(p.true_rate, p.pred_rate)
        canvas.circle(x, y, 2.2, LABEL_COLORS[p.label])
    canvas.text(canvas.width / 2, 20, title, size=13, anchor="middle")
    _legend(canvas)
    canvas.save(path)


def _legend(canvas: SvgCanvas) -> None:
    x = canvas.width - 150
    for i, label in enumerate(("AP", "BE", "EP")):
        canvas.circle(x, 40 + 16 * i, 4, LABEL_COLORS[label])
        canvas.text(x + 10, 44 + 16 * i, label, size=11)
