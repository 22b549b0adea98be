"""Tiny static SVG plots: scatter and line charts for the report command.

Hand-written SVG keeps outputs byte-deterministic and lets tests read the
axis ranges straight from data-* attributes on the root element.
"""

from __future__ import annotations

import math

_W, _H = 480, 360
_ML, _MR, _MT, _MB = 56, 16, 28, 44


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _axis_range(values, pad_frac=0.06):
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    pad = (hi - lo) * pad_frac
    return lo - pad, hi + pad


def _ticks(lo, hi, n=5):
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * abs(step):
        out.append(round(t, 10))
        t += step
    return out


class _Canvas:
    def __init__(self, x_range, y_range, title, xlabel, ylabel):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" data-x-min="{_fmt(self.x0)}" data-x-max="{_fmt(self.x1)}" '
            f'data-y-min="{_fmt(self.y0)}" data-y-max="{_fmt(self.y1)}">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="14" font-family="sans-serif">{title}</text>',
            f'<text x="{_W / 2}" y="{_H - 8}" text-anchor="middle" font-size="12" font-family="sans-serif">{xlabel}</text>',
            f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" font-family="sans-serif" '
            f'transform="rotate(-90 14 {_H / 2})">{ylabel}</text>',
        ]
        self._frame_and_ticks()

    def px(self, x):
        return _ML + (x - self.x0) / (self.x1 - self.x0) * (_W - _ML - _MR)

    def py(self, y):
        return _H - _MB - (y - self.y0) / (self.y1 - self.y0) * (_H - _MT - _MB)

    def _frame_and_ticks(self):
        self.parts.append(
            f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" height="{_H - _MT - _MB}" '
            f'fill="none" stroke="#333" stroke-width="1"/>'
        )
        for t in _ticks(self.x0, self.x1):
            x = self.px(t)
            self.parts.append(f'<line x1="{_fmt(x)}" y1="{_H - _MB}" x2="{_fmt(x)}" y2="{_H - _MB + 4}" stroke="#333"/>')
            self.parts.append(
                f'<text x="{_fmt(x)}" y="{_H - _MB + 16}" text-anchor="middle" font-size="10" '
                f'font-family="sans-serif">{_fmt(t)}</text>'
            )
        for t in _ticks(self.y0, self.y1):
            y = self.py(t)
            self.parts.append(f'<line x1="{_ML - 4}" y1="{_fmt(y)}" x2="{_ML}" y2="{_fmt(y)}" stroke="#333"/>')
            self.parts.append(
                f'<text x="{_ML - 7}" y="{_fmt(y + 3)}" text-anchor="end" font-size="10" '
                f'font-family="sans-serif">{_fmt(t)}</text>'
            )

    def finish(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def scatter_svg(xs, ys, title, xlabel, ylabel, annotation=None, identity=False) -> str:
    if len(xs) != len(ys) or not xs:
        raise ValueError("scatter needs equally many xs and ys")
    allv = list(xs) + list(ys) if identity else None
    cv = _Canvas(
        _axis_range(allv or xs),
        _axis_range(allv or ys),
        title,
        xlabel,
        ylabel,
    )
    if identity:
        lo = max(cv.x0, cv.y0)
        hi = min(cv.x1, cv.y1)
        cv.parts.append(
            f'<line x1="{_fmt(cv.px(lo))}" y1="{_fmt(cv.py(lo))}" x2="{_fmt(cv.px(hi))}" '
            f'y2="{_fmt(cv.py(hi))}" stroke="#bbb" stroke-dasharray="4 3"/>'
        )
    for x, y in zip(xs, ys):
        cv.parts.append(
            f'<circle cx="{_fmt(cv.px(x))}" cy="{_fmt(cv.py(y))}" r="3.5" fill="#1f77b4" fill-opacity="0.75"/>'
        )
    if annotation:
        cv.parts.append(
            f'<text x="{_ML + 10}" y="{_MT + 18}" font-size="12" font-family="sans-serif">{annotation}</text>'
        )
    return cv.finish()


def line_svg(xs, ys, title, xlabel, ylabel) -> str:
    if len(xs) != len(ys) or not xs:
        raise ValueError("line plot needs equally many xs and ys")
    cv = _Canvas(_axis_range(xs), _axis_range(ys), title, xlabel, ylabel)
    pts = " ".join(f"{_fmt(cv.px(x))},{_fmt(cv.py(y))}" for x, y in zip(xs, ys))
    cv.parts.append(f'<polyline points="{pts}" fill="none" stroke="#d62728" stroke-width="2"/>')
    for x, y in zip(xs, ys):
        cv.parts.append(f'<circle cx="{_fmt(cv.px(x))}" cy="{_fmt(cv.py(y))}" r="3" fill="#d62728"/>')
    return cv.finish()
