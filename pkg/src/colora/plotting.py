"""A minimal SVG line-plot writer for training curves and ROC curves.

CSV files remain the canonical outputs; these plots are for looking at.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["Series", "Band", "line_plot"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    dashed: bool = False


@dataclass
class Band:
    """Shaded region between ``lo`` and ``hi``, drawn under the series with the same ``label``."""

    label: str
    x: Sequence[float]
    lo: Sequence[float]
    hi: Sequence[float]
    opacity: float = 0.2


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step - 1e-9) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


@dataclass
class _Frame:
    xlim: tuple
    ylim: tuple
    width: int
    height: int
    margin: dict = field(default_factory=lambda: {"l": 60, "r": 130, "t": 34, "b": 46})

    def px(self, x: float) -> float:
        lo, hi = self.xlim
        span = self.width - self.margin["l"] - self.margin["r"]
        return self.margin["l"] + (x - lo) / (hi - lo) * span

    def py(self, y: float) -> float:
        lo, hi = self.ylim
        span = self.height - self.margin["t"] - self.margin["b"]
        return self.height - self.margin["b"] - (y - lo) / (hi - lo) * span


def _limits(values: list[np.ndarray], fixed: Optional[tuple]) -> tuple:
    if fixed is not None:
        return fixed
    finite = np.concatenate([v[np.isfinite(v)] for v in values]) if values else np.array([])
    if finite.size == 0:
        return (0.0, 1.0)
    lo, hi = float(finite.min()), float(finite.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return (lo, hi)


def _polyline(frame: _Frame, x, y) -> str:
    pts = [f"{frame.px(a):.2f},{frame.py(b):.2f}" for a, b in zip(x, y) if np.isfinite(b)]
    return " ".join(pts)


def line_plot(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
              bands: Sequence[Band] = (), xlim: Optional[tuple] = None, ylim: Optional[tuple] = None,
              width: int = 640, height: int = 400) -> str:
    """Render series (and optional bands) as a standalone SVG document."""
    if not series:
        raise ValueError("nothing to plot")
    xs = [np.asarray(s.x, dtype=np.float64) for s in series] + [np.asarray(b.x, dtype=np.float64) for b in bands]
    ys = [np.asarray(s.y, dtype=np.float64) for s in series]
    ys += [np.asarray(b.lo, dtype=np.float64) for b in bands] + [np.asarray(b.hi, dtype=np.float64) for b in bands]
    frame = _Frame(_limits(xs, xlim), _limits(ys, ylim), width, height)
    colors = {s.label: PALETTE[i % len(PALETTE)] for i, s in enumerate(series)}
    m = frame.margin
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']

    x0, x1 = m["l"], width - m["r"]
    y0, y1 = height - m["b"], m["t"]
    for t in _ticks(*frame.xlim):
        px = frame.px(t)
        out.append(f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{y0 + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(*frame.ylim):
        py = frame.py(t)
        out.append(f'<line x1="{x0 - 5}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<line x1="{x0}" y1="{py:.2f}" x2="{x1}" y2="{py:.2f}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{x0 - 8}" y="{py + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>')
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>')

    for b in bands:
        color = colors.get(b.label, PALETTE[-1])
        upper = _polyline(frame, b.x, b.hi)
        lower = _polyline(frame, list(b.x)[::-1], list(b.lo)[::-1])
        out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="{b.opacity}" stroke="none"/>')
    for s in series:
        dash = ' stroke-dasharray="5,4"' if s.dashed else ""
        out.append(f'<polyline points="{_polyline(frame, s.x, s.y)}" fill="none" '
                   f'stroke="{colors[s.label]}" stroke-width="1.8"{dash}/>')

    for i, s in enumerate(series):
        ly = m["t"] + 14 + 18 * i
        out.append(f'<line x1="{x1 + 10}" y1="{ly - 4}" x2="{x1 + 30}" y2="{ly - 4}" '
                   f'stroke="{colors[s.label]}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 35}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
