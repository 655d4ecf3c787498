"""Minimal SVG charts (scatter, horizontal bars, histogram) with no plotting dependency."""

from __future__ import annotations

from html import escape
from typing import Sequence

import numpy as np

W, H = 420, 320
PAD_L, PAD_R, PAD_T, PAD_B = 52, 16, 30, 40
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _frame(title: str, body: list[str], width: int = W, height: int = H) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    t = f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', t, *body, "</svg>"]) + "\n"


def _range(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return 0.0, 1.0
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _axes(xr, yr, xlabel, ylabel, width=W, height=H) -> list[str]:
    x0, x1, y0, y1 = PAD_L, width - PAD_R, height - PAD_B, PAD_T
    out = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for i in range(5):
        f = i / 4
        xv = xr[0] + f * (xr[1] - xr[0])
        yv = yr[0] + f * (yr[1] - yr[0])
        px = x0 + f * (x1 - x0)
        py = y0 + f * (y1 - y0)
        out.append(f'<text x="{px:.1f}" y="{y0 + 14}" text-anchor="middle">{_fmt(xv)}</text>')
        out.append(f'<text x="{x0 - 4}" y="{py + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="12" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 12 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>')
    return out


def scatter(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str, xlabel: str, ylabel: str,
            identity_line: bool = False) -> str:
    """One colour per series; ``identity_line`` draws y = x."""
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()] or [np.zeros(0)])
    ys = np.concatenate([np.asarray(s[1], float) for s in series.values()] or [np.zeros(0)])
    if identity_line:
        xr = yr = _range(np.concatenate([xs, ys]))
    else:
        xr, yr = _range(xs), _range(ys)
    sx = lambda v: PAD_L + (v - xr[0]) / (xr[1] - xr[0]) * (W - PAD_L - PAD_R)  # noqa: E731
    sy = lambda v: H - PAD_B - (v - yr[0]) / (yr[1] - yr[0]) * (H - PAD_T - PAD_B)  # noqa: E731
    body = _axes(xr, yr, xlabel, ylabel)
    if identity_line:
        body.append(f'<line x1="{sx(xr[0]):.1f}" y1="{sy(xr[0]):.1f}" x2="{sx(xr[1]):.1f}" y2="{sy(xr[1]):.1f}" '
                    f'stroke="gray" stroke-dasharray="4 3"/>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        for a, b in zip(x, y):
            body.append(f'<circle cx="{sx(a):.1f}" cy="{sy(b):.1f}" r="2.5" fill="{color}" fill-opacity="0.7"/>')
        body.append(f'<text x="{PAD_L + 8}" y="{PAD_T + 12 + 13 * i}" fill="{color}">{escape(name)}</text>')
    return _frame(title, body)


def bars(labels: Sequence[str], values: Sequence[float], title: str, xlabel: str,
         highlight: Sequence[str] = ()) -> str:
    """Horizontal bar chart, first label on top."""
    n = max(len(labels), 1)
    row = 16
    height = PAD_T + PAD_B + row * n
    vmax = max([float(v) for v in values] + [0.0]) or 1.0
    x0, x1 = 70, W - PAD_R
    body = []
    for i, (lab, v) in enumerate(zip(labels, values)):
        y = PAD_T + i * row
        w = (x1 - x0) * float(v) / vmax
        color = PALETTE[1] if lab in highlight else PALETTE[0]
        body.append(f'<rect x="{x0}" y="{y + 2}" width="{w:.1f}" height="{row - 4}" fill="{color}"/>')
        body.append(f'<text x="{x0 - 4}" y="{y + row - 4}" text-anchor="end">{escape(str(lab))}</text>')
    body.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)} '
                f'(max {_fmt(vmax)})</text>')
    return _frame(title, body, height=height)


def histogram(series: dict[str, Sequence[float]], title: str, xlabel: str, bins: int = 20) -> str:
    allv = np.concatenate([np.asarray(v, float) for v in series.values()] or [np.zeros(0)])
    xr = _range(allv)
    edges = np.linspace(xr[0], xr[1], bins + 1)
    counts = {k: np.histogram(np.asarray(v, float), edges)[0] for k, v in series.items()}
    cmax = max([int(c.max()) for c in counts.values() if c.size] + [1])
    body = _axes(xr, (0.0, float(cmax)), xlabel, "count")
    bw = (W - PAD_L - PAD_R) / bins
    for i, (name, c) in enumerate(counts.items()):
        color = PALETTE[i % len(PALETTE)]
        for j, k in enumerate(c):
            if k == 0:
                continue
            h = (H - PAD_T - PAD_B) * k / cmax
            body.append(f'<rect x="{PAD_L + j * bw:.1f}" y="{H - PAD_B - h:.1f}" width="{bw:.1f}" '
                        f'height="{h:.1f}" fill="{color}" fill-opacity="0.45"/>')
        body.append(f'<text x="{W - PAD_R - 4}" y="{PAD_T + 12 + 13 * i}" text-anchor="end" '
                    f'fill="{color}">{escape(name)}</text>')
    return _frame(title, body)
