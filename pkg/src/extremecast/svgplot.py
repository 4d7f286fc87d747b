"""Minimal SVG charts: grouped bars with error whiskers, and line plots.

Output is a self-contained <svg> document built from the data alone, so a
chart written twice from the same inputs is byte-identical.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#c0392b", "#2b6cb0", "#55803d", "#8e6a1f", "#6d4b9e",
           "#2a7f7a", "#aa4a73", "#555555")


def _fmt(v: float) -> str:
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def _coord(v: float) -> str:
    return f"{v:.2f}"


def nice_ticks(lo: float, hi: float, target: int = 5) -> list:
    """Round tick positions covering [lo, hi] with a 1/2/5-scaled step."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("tick range must be finite")
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if raw <= step:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + step * 1e-9:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


class _Canvas:
    def __init__(self, width, height, title):
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}" '
            f'font-family="sans-serif">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]
        if title:
            self.text(width / 2, 18, title, anchor="middle", size=14)

    def line(self, x1, y1, x2, y2, color="#333", width=1.0):
        self.parts.append(
            f'<line x1="{_coord(x1)}" y1="{_coord(y1)}" x2="{_coord(x2)}" '
            f'y2="{_coord(y2)}" stroke="{color}" '
            f'stroke-width="{_fmt(width)}"/>')

    def rect(self, x, y, w, h, color):
        self.parts.append(
            f'<rect x="{_coord(x)}" y="{_coord(y)}" width="{_coord(w)}" '
            f'height="{_coord(h)}" fill="{color}"/>')

    def text(self, x, y, s, anchor="start", size=11, rotate=None,
             color="#222"):
        extra = ""
        if rotate is not None:
            extra = (f' transform="rotate({_fmt(rotate)} {_coord(x)} '
                     f'{_coord(y)})"')
        self.parts.append(
            f'<text x="{_coord(x)}" y="{_coord(y)}" font-size="{size}" '
            f'fill="{color}" text-anchor="{anchor}"{extra}>'
            f'{escape(str(s))}</text>')

    def polyline(self, pts, color, width=1.5):
        joined = " ".join(f"{_coord(x)},{_coord(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{joined}" fill="none" stroke="{color}" '
            f'stroke-width="{_fmt(width)}"/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"])


def _series_color(series, i):
    return series.get("color") or PALETTE[i % len(PALETTE)]


def _value_range(values):
    lo = min(0.0, min(values))
    hi = max(0.0, max(values))
    if hi == lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _legend(canvas, series, x_right):
    x = x_right - 120
    for i, s in enumerate(series):
        y = 30 + 16 * i
        canvas.rect(x, y - 9, 11, 11, _series_color(s, i))
        canvas.text(x + 16, y, s["name"], size=11)


def bar_chart(groups, series, title="", ylabel="",
              width=None, height=360) -> str:
    """Grouped vertical bars; optional per-value standard-error whiskers.

    groups: category labels along x. series: dicts with name, values
    (one per group), optional errors and color.
    """
    if not groups or not series:
        raise ValueError("need at least one group and one series")
    for s in series:
        if len(s["values"]) != len(groups):
            raise ValueError(f"series {s['name']!r} length mismatch")
    if width is None:
        width = max(420, 56 + 30 * len(groups) * len(series))

    left, right, top, bottom = 56, 14, 30, 92
    plot_w = width - left - right
    plot_h = height - top - bottom

    spans = []
    for s in series:
        err = s.get("errors") or [0.0] * len(groups)
        spans.extend(v - e for v, e in zip(s["values"], err))
        spans.extend(v + e for v, e in zip(s["values"], err))
    lo, hi = _value_range(spans)

    def y(v):
        return top + plot_h * (hi - v) / (hi - lo)

    canvas = _Canvas(width, height, title)
    for t in nice_ticks(lo, hi):
        canvas.line(left, y(t), left + plot_w, y(t), color="#ddd")
        canvas.text(left - 6, y(t) + 4, _fmt(t), anchor="end", size=10)
    if ylabel:
        canvas.text(14, top + plot_h / 2, ylabel, anchor="middle",
                    size=11, rotate=-90)

    slot = plot_w / len(groups)
    usable = slot * 0.72
    bar_w = usable / len(series)
    for gi, label in enumerate(groups):
        x0 = left + gi * slot + (slot - usable) / 2
        for si, s in enumerate(series):
            v = s["values"][gi]
            color = _series_color(s, si)
            xb = x0 + si * bar_w
            canvas.rect(xb, y(max(v, 0.0)), bar_w * 0.92,
                        abs(y(v) - y(0.0)), color)
            err = (s.get("errors") or [0.0] * len(groups))[gi]
            if err > 0:
                cx = xb + bar_w * 0.46
                canvas.line(cx, y(v - err), cx, y(v + err), color="#222")
                for vv in (v - err, v + err):
                    canvas.line(cx - bar_w * 0.25, y(vv),
                                cx + bar_w * 0.25, y(vv), color="#222")
        canvas.text(left + gi * slot + slot / 2, top + plot_h + 14,
                    label, anchor="end", size=10, rotate=-40)
    canvas.line(left, y(0.0), left + plot_w, y(0.0))
    canvas.line(left, top, left, top + plot_h)
    _legend(canvas, series, width - right)
    return canvas.render()


def line_chart(series, title="", xlabel="", ylabel="",
               width=720, height=300) -> str:
    """Overlaid line plots; each series has name, y, optional x and color."""
    if not series:
        raise ValueError("need at least one series")
    left, right, top, bottom = 56, 14, 30, 46
    plot_w = width - left - right
    plot_h = height - top - bottom

    xs_all, ys_all = [], []
    for s in series:
        ys = list(s["y"])
        if not ys:
            raise ValueError(f"series {s['name']!r} is empty")
        xs = list(s.get("x") if s.get("x") is not None
                  else range(len(ys)))
        if len(xs) != len(ys):
            raise ValueError(f"series {s['name']!r} x/y length mismatch")
        xs_all.extend(xs)
        ys_all.extend(ys)
    x_lo, x_hi = min(xs_all), max(xs_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = _value_range(ys_all)

    def px(v):
        return left + plot_w * (v - x_lo) / (x_hi - x_lo)

    def py(v):
        return top + plot_h * (y_hi - v) / (y_hi - y_lo)

    canvas = _Canvas(width, height, title)
    for t in nice_ticks(y_lo, y_hi):
        canvas.line(left, py(t), left + plot_w, py(t), color="#ddd")
        canvas.text(left - 6, py(t) + 4, _fmt(t), anchor="end", size=10)
    for t in nice_ticks(x_lo, x_hi, target=6):
        canvas.text(px(t), top + plot_h + 16, _fmt(t), anchor="middle",
                    size=10)
    if ylabel:
        canvas.text(14, top + plot_h / 2, ylabel, anchor="middle",
                    size=11, rotate=-90)
    if xlabel:
        canvas.text(left + plot_w / 2, height - 8, xlabel,
                    anchor="middle", size=11)

    for i, s in enumerate(series):
        ys = list(s["y"])
        xs = list(s.get("x") if s.get("x") is not None
                  else range(len(ys)))
        canvas.polyline([(px(x), py(v)) for x, v in zip(xs, ys)],
                        _series_color(s, i))
    canvas.line(left, top + plot_h, left + plot_w, top + plot_h)
    canvas.line(left, top, left, top + plot_h)
    _legend(canvas, series, width - right)
    return canvas.render()
