"""Minimal deterministic SVG emission for line plots and heatmaps.

Plots are written directly as standalone SVG so outputs are hermetic and
byte-stable under fixed inputs: same arrays in, same bytes out.
"""
from __future__ import annotations

import math

import numpy as np

_PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#8c5383",
            "#e09f3e", "#335c67", "#540d6e")

# dark-blue -> teal -> yellow anchors, linearly interpolated
_HEAT_ANCHORS = (
    (0.267, 0.005, 0.329), (0.283, 0.141, 0.458), (0.254, 0.265, 0.530),
    (0.207, 0.372, 0.553), (0.164, 0.471, 0.558), (0.128, 0.567, 0.551),
    (0.135, 0.659, 0.518), (0.478, 0.821, 0.318), (0.993, 0.906, 0.144))


def _heat_color(v: float) -> str:
    v = min(max(float(v), 0.0), 1.0)
    pos = v * (len(_HEAT_ANCHORS) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(_HEAT_ANCHORS) - 1)
    frac = pos - lo
    rgb = [(1.0 - frac) * a + frac * b
           for a, b in zip(_HEAT_ANCHORS[lo], _HEAT_ANCHORS[hi])]
    return "#%02x%02x%02x" % tuple(int(round(255 * c)) for c in rgb)


def _ticks(lo: float, hi: float, target: int = 5) -> list:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / target
    mag = 10.0 ** math.floor(math.log10(raw))
    step = 10.0 * mag
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if span / (mult * mag) <= target:
            step = mult * mag
            break
    first = math.ceil(lo / step - 1e-9) * step
    out = []
    t = first
    while t <= hi + 1e-9 * span:
        out.append(0.0 if abs(t) < 1e-12 * span else t)
        t += step
    return out


def _fmt(v: float) -> str:
    return f"{v:g}"


class _Canvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" '
            f'fill="#ffffff"/>']

    def rect(self, x, y, w, h, fill, opacity=None):
        extra = f' fill-opacity="{opacity}"' if opacity is not None else ""
        self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" '
                          f'height="{h:.2f}" fill="{fill}"{extra}/>')

    def line(self, x1, y1, x2, y2, stroke="#000000", width=1.0):
        self.parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" '
                          f'x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" '
                          f'stroke-width="{width}"/>')

    def polyline(self, points, stroke, width=1.5):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.parts.append(f'<polyline points="{coords}" fill="none" '
                          f'stroke="{stroke}" stroke-width="{width}"/>')

    def text(self, x, y, s, size=11, anchor="start", rotate=None,
             fill="#000000"):
        tr = (f' transform="rotate({rotate} {x:.2f} {y:.2f})"'
              if rotate is not None else "")
        self.parts.append(f'<text x="{x:.2f}" y="{y:.2f}" '
                          f'font-family="sans-serif" font-size="{size}" '
                          f'text-anchor="{anchor}" fill="{fill}"{tr}>'
                          f'{s}</text>')

    def write(self, path):
        self.parts.append("</svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(self.parts) + "\n")


def line_plot(path, x, series: dict, *, title: str = "",
              xlabel: str = "", ylabel: str = "", shade=None,
              shade_label: str = "shaded", width: int = 720,
              height: int = 400) -> None:
    """Polyline plot of named series against a shared x axis.

    ``shade`` is an optional boolean mask aligned with ``x``; contiguous
    runs are drawn as translucent background spans (e.g. contact frames).
    """
    x = np.asarray(x, dtype=np.float64)
    arrays = {name: np.asarray(y, dtype=np.float64)
              for name, y in series.items()}
    for name, y in arrays.items():
        if y.shape != x.shape:
            raise ValueError(f"series {name!r} length {y.shape} does not "
                             f"match x {x.shape}")
    left, right, top, bottom = 62, 16, 30, 46
    pw = width - left - right
    ph = height - top - bottom
    x_lo, x_hi = float(x.min()), float(x.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_all = np.concatenate(list(arrays.values())) if arrays else np.zeros(1)
    y_lo, y_hi = float(y_all.min()), float(y_all.max())
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return top + (y_hi - v) / (y_hi - y_lo) * ph

    c = _Canvas(width, height)
    if title:
        c.text(width / 2.0, 18, title, size=13, anchor="middle")

    if shade is not None:
        mask = np.asarray(shade, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError("shade mask must match x")
        half = 0.5 * (x_hi - x_lo) / max(len(x) - 1, 1)
        i = 0
        while i < len(mask):
            if mask[i]:
                j = i
                while j + 1 < len(mask) and mask[j + 1]:
                    j += 1
                x0 = max(x_lo, x[i] - half)
                x1 = min(x_hi, x[j] + half)
                c.rect(px(x0), top, px(x1) - px(x0), ph, "#c8c8c8",
                       opacity=0.45)
                i = j + 1
            else:
                i += 1

    for t in _ticks(x_lo, x_hi):
        c.line(px(t), top + ph, px(t), top + ph + 4)
        c.text(px(t), top + ph + 16, _fmt(t), size=10, anchor="middle")
    for t in _ticks(y_lo, y_hi):
        c.line(left - 4, py(t), left, py(t))
        c.text(left - 7, py(t) + 3.5, _fmt(t), size=10, anchor="end")
    c.line(left, top, left, top + ph)
    c.line(left, top + ph, left + pw, top + ph)
    if xlabel:
        c.text(left + pw / 2.0, height - 10, xlabel, anchor="middle")
    if ylabel:
        c.text(16, top + ph / 2.0, ylabel, anchor="middle", rotate=-90)

    for k, (name, y) in enumerate(arrays.items()):
        color = _PALETTE[k % len(_PALETTE)]
        c.polyline([(px(xi), py(yi)) for xi, yi in zip(x, y)], color)
        ly = top + 14 + 15 * k
        c.line(left + pw - 92, ly - 4, left + pw - 74, ly - 4, color, 2.0)
        c.text(left + pw - 70, ly, name, size=10)
    if shade is not None and shade_label:
        ly = top + 14 + 15 * len(arrays)
        c.rect(left + pw - 92, ly - 11, 18, 10, "#c8c8c8", opacity=0.45)
        c.text(left + pw - 70, ly - 2, shade_label, size=10)
    c.write(path)


def heatmap(path, grid, *, extent, title: str = "", xlabel: str = "",
            ylabel: str = "", mark=None, width: int = 520,
            height: int = 460) -> None:
    """Cell-by-cell heatmap of ``grid`` with a colorbar.

    ``grid[i, j]`` is drawn at x = i, y = j positions spanning ``extent``
    = (x_lo, x_hi, y_lo, y_hi); ``mark`` places a cross (e.g. ground
    truth) in data coordinates.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("grid must be 2D")
    x_lo, x_hi, y_lo, y_hi = (float(v) for v in extent)
    ni, nj = grid.shape
    left, right, top, bottom = 62, 86, 30, 46
    pw = width - left - right
    ph = height - top - bottom
    v_lo, v_hi = float(grid.min()), float(grid.max())
    span = v_hi - v_lo

    def norm(v):
        return 0.5 if span == 0 else (v - v_lo) / span

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return top + (y_hi - v) / (y_hi - y_lo) * ph

    c = _Canvas(width, height)
    if title:
        c.text(width / 2.0, 18, title, size=13, anchor="middle")
    cw = pw / ni
    ch = ph / nj
    for i in range(ni):
        for j in range(nj):
            c.rect(left + i * cw, top + (nj - 1 - j) * ch, cw + 0.05,
                   ch + 0.05, _heat_color(norm(grid[i, j])))
    for t in _ticks(x_lo, x_hi):
        c.line(px(t), top + ph, px(t), top + ph + 4)
        c.text(px(t), top + ph + 16, _fmt(t), size=10, anchor="middle")
    for t in _ticks(y_lo, y_hi):
        c.line(left - 4, py(t), left, py(t))
        c.text(left - 7, py(t) + 3.5, _fmt(t), size=10, anchor="end")
    if xlabel:
        c.text(left + pw / 2.0, height - 10, xlabel, anchor="middle")
    if ylabel:
        c.text(16, top + ph / 2.0, ylabel, anchor="middle", rotate=-90)
    if mark is not None:
        mx, my = px(mark[0]), py(mark[1])
        c.line(mx - 6, my, mx + 6, my, "#ffffff", 2.0)
        c.line(mx, my - 6, mx, my + 6, "#ffffff", 2.0)

    bar_x = width - right + 24
    n_seg = 64
    seg = ph / n_seg
    for k in range(n_seg):
        c.rect(bar_x, top + ph - (k + 1) * seg, 16, seg + 0.05,
               _heat_color((k + 0.5) / n_seg))
    c.text(bar_x + 20, top + 10, _fmt(v_hi), size=10)
    c.text(bar_x + 20, top + ph, _fmt(v_lo), size=10)
    c.write(path)
