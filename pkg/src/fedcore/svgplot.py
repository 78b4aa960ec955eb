"""Minimal hand-written SVG line charts (axes, ticks, legend, polylines)."""

import math
from xml.sax.saxutils import escape

__all__ = ["line_chart", "write_line_chart"]

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf", "#bcbd22"]
W, H = 640, 400
L, R, T, B = 70, 170, 40, 50


def _ticks(lo, hi, count=5):
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / count))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= count:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * abs(hi):
        out.append(v)
        v += step
    return out


def _fmt(v):
    return f"{v:.4g}"


def line_chart(series, title="", xlabel="", ylabel="", logy=False):
    """``series`` is a list of ``(label, xs, ys)``; returns the SVG document text.

    With ``logy`` nonpositive values are dropped and the axis shows powers of ten.
    """
    pts = []
    for label, xs, ys in series:
        pairs = [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(float(y)) and (not logy or y > 0)]
        if logy:
            pairs = [(x, math.log10(y)) for x, y in pairs]
        pts.append((label, pairs))
    allx = [x for _, p in pts for x, _ in p] or [0.0, 1.0]
    ally = [y for _, p in pts for _, y in p] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def sy(y):
        return H - B - (y - y0) / (y1 - y0) * (H - T - B)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{(W - R + L) / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
    ]
    for v in _ticks(x0, x1):
        out.append(f'<line x1="{sx(v):.1f}" y1="{H - B}" x2="{sx(v):.1f}" y2="{H - B + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(v):.1f}" y="{H - B + 18}" text-anchor="middle">{_fmt(v)}</text>')
    for v in _ticks(y0, y1):
        label = f"1e{v:g}" if logy else _fmt(v)
        out.append(f'<line x1="{L - 5}" y1="{sy(v):.1f}" x2="{L}" y2="{sy(v):.1f}" stroke="black"/>')
        out.append(f'<text x="{L - 8}" y="{sy(v) + 4:.1f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{(W - R + L) / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="18" y="{(H - B + T) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(H - B + T) / 2:.1f})">{escape(ylabel)}</text>'
    )
    for j, (label, p) in enumerate(pts):
        color = _COLORS[j % len(_COLORS)]
        if p:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in p)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = T + 16 * j
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 35}" y="{ly + 4}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_line_chart(path, series, **kw):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(line_chart(series, **kw))
