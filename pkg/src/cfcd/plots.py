"""Dependency-free SVG plots. Every figure carries its data as a CSV table
inside an XML comment so the file can be diffed and re-plotted."""

from typing import Dict, Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 360
PAD_L, PAD_R, PAD_T, PAD_B = 60, 20, 30, 40
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")


def _fmt(v):
    return f"{float(v):.6g}"


def _data_comment(header, rows):
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    # "--" may not appear inside an XML comment
    body = "\n".join(lines).replace("--", "- -")
    return f"<!-- data\n{body}\n-->"


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        return PAD_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - PAD_L - PAD_R)

    def py(self, y):
        return HEIGHT - PAD_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - PAD_T - PAD_B)

    def axes(self, title, xlabel, ylabel):
        x_lo, x_hi = PAD_L, WIDTH - PAD_R
        y_lo, y_hi = HEIGHT - PAD_B, PAD_T
        out = [
            f'<line x1="{x_lo}" y1="{y_lo}" x2="{x_hi}" y2="{y_lo}" stroke="black"/>',
            f'<line x1="{x_lo}" y1="{y_lo}" x2="{x_lo}" y2="{y_hi}" stroke="black"/>',
            f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 6}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        ]
        for v in np.linspace(self.x0, self.x1, 5):
            out.append(f'<text x="{self.px(v):.1f}" y="{y_lo + 14}" text-anchor="middle" font-size="10">{_fmt(v)}</text>')
        for v in np.linspace(self.y0, self.y1, 5):
            out.append(f'<text x="{x_lo - 4}" y="{self.py(v) + 3:.1f}" text-anchor="end" font-size="10">{_fmt(v)}</text>')
        return out


def _document(parts, comment):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head, comment, *parts, "</svg>", ""])


def _legend(names):
    out = []
    for k, name in enumerate(names):
        y = PAD_T + 8 + 14 * k
        color = COLORS[k % len(COLORS)]
        out.append(f'<rect x="{WIDTH - PAD_R - 120}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{WIDTH - PAD_R - 105}" y="{y + 1}" font-size="11">{escape(name)}</text>')
    return out


def histogram_svg(edges: Sequence[float], counts: Dict[str, Sequence[int]], title, xlabel="value"):
    """Step histograms sharing one set of bin edges."""
    edges = np.asarray(edges, dtype=float)
    names = list(counts)
    cols = [np.asarray(counts[n], dtype=float) for n in names]
    ymax = max((c.max() for c in cols if c.size), default=1.0)
    frame = _Frame((edges[0], edges[-1]), (0.0, max(ymax, 1.0)))
    parts = frame.axes(title, xlabel, "count")
    for k, c in enumerate(cols):
        pts = []
        for b, v in enumerate(c):
            pts.append(f"{frame.px(edges[b]):.2f},{frame.py(v):.2f}")
            pts.append(f"{frame.px(edges[b + 1]):.2f},{frame.py(v):.2f}")
        parts.append(f'<polyline fill="none" stroke="{COLORS[k % len(COLORS)]}" points="{" ".join(pts)}"/>')
    parts += _legend(names)
    rows = [[edges[b], edges[b + 1], *(c[b] for c in cols)] for b in range(len(edges) - 1)]
    return _document(parts, _data_comment(["bin_lo", "bin_hi", *names], rows))


def lines_svg(x: Sequence[float], series: Dict[str, Sequence[float]], title, xlabel="step", ylabel="value"):
    x = np.asarray(x, dtype=float)
    names = list(series)
    ys = [np.asarray(series[n], dtype=float) for n in names]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    frame = _Frame((float(x.min()), float(x.max())) if x.size else (0.0, 1.0), (lo, hi))
    parts = frame.axes(title, xlabel, ylabel)
    for k, y in enumerate(ys):
        pts = " ".join(f"{frame.px(a):.2f},{frame.py(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{COLORS[k % len(COLORS)]}" points="{pts}"/>')
    parts += _legend(names)
    rows = [[a, *(y[i] for y in ys)] for i, a in enumerate(x)]
    return _document(parts, _data_comment([xlabel, *names], rows))


def read_data_comment(svg_text):
    """Recover the embedded table as ``(header, rows)``."""
    start = svg_text.index("<!-- data\n") + len("<!-- data\n")
    end = svg_text.index("\n-->", start)
    lines = svg_text[start:end].replace("- -", "--").splitlines()
    header = lines[0].split(",")
    return header, [[float(v) for v in ln.split(",")] for ln in lines[1:]]
