"""Dependency-free SVG box plots.

Fixed 640x480 canvas.  One box per group: box from Q1 to Q3 with a median
line, whiskers to the most extreme points within 1.5 IQR of the box, and
circles for outliers beyond the whiskers.  Quartiles use linear
interpolation (numpy default).
"""

from __future__ import annotations

import numpy as np

__all__ = ["boxplot_svg", "write_boxplot"]

WIDTH = 640
HEIGHT = 480
MARGIN_LEFT = 70
MARGIN_RIGHT = 20
MARGIN_TOP = 50
MARGIN_BOTTOM = 60


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _box_stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(arr, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = arr[(arr >= lo_fence) & (arr <= hi_fence)]
    return {
        "q1": q1, "median": median, "q3": q3,
        "whisker_lo": inside.min(), "whisker_hi": inside.max(),
        "outliers": arr[(arr < lo_fence) | (arr > hi_fence)],
    }


def boxplot_svg(groups: dict[str, list[float]], title: str, y_label: str = "") -> str:
    """Render one box per group and return the SVG document as a string."""
    if not groups:
        raise ValueError("boxplot needs at least one group")
    for name, values in groups.items():
        if not len(values):
            raise ValueError(f"group {name!r} has no values")
    stats = {name: _box_stats(values) for name, values in groups.items()}

    all_values = np.concatenate([np.asarray(v, dtype=np.float64) for v in groups.values()])
    lo, hi = float(all_values.min()), float(all_values.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT

    def y_of(v: float) -> float:
        return MARGIN_TOP + plot_h * (hi - v) / (hi - lo)

    n = len(groups)
    slot = plot_w / n
    box_w = min(60.0, slot * 0.5)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
    ]
    if y_label:
        parts.append(
            f'<text x="16" y="{MARGIN_TOP + plot_h / 2}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {MARGIN_TOP + plot_h / 2})">{y_label}</text>')

    # axes and y ticks
    x0, y0, y1 = MARGIN_LEFT, MARGIN_TOP, MARGIN_TOP + plot_h
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y1}" x2="{x0 + plot_w}" y2="{y1}" stroke="black"/>')
    for tick in np.linspace(lo, hi, 6):
        ty = y_of(float(tick))
        parts.append(f'<line x1="{x0 - 4}" y1="{_fmt(ty)}" x2="{x0}" y2="{_fmt(ty)}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{_fmt(ty + 4)}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{tick:.4g}</text>')

    for k, (name, st) in enumerate(stats.items()):
        cx = MARGIN_LEFT + slot * (k + 0.5)
        half = box_w / 2
        y_q1, y_q3 = y_of(st["q1"]), y_of(st["q3"])
        y_med = y_of(st["median"])
        y_wlo, y_whi = y_of(st["whisker_lo"]), y_of(st["whisker_hi"])

        # whiskers with caps
        for y_w, y_box in ((y_whi, y_q3), (y_wlo, y_q1)):
            parts.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(y_w)}" x2="{_fmt(cx)}" '
                         f'y2="{_fmt(y_box)}" stroke="black" stroke-dasharray="4 2"/>')
            parts.append(f'<line x1="{_fmt(cx - half / 2)}" y1="{_fmt(y_w)}" '
                         f'x2="{_fmt(cx + half / 2)}" y2="{_fmt(y_w)}" stroke="black"/>')
        parts.append(f'<rect x="{_fmt(cx - half)}" y="{_fmt(y_q3)}" width="{_fmt(box_w)}" '
                     f'height="{_fmt(max(y_q1 - y_q3, 0.0))}" fill="#9ecae1" '
                     f'stroke="black"/>')
        parts.append(f'<line x1="{_fmt(cx - half)}" y1="{_fmt(y_med)}" '
                     f'x2="{_fmt(cx + half)}" y2="{_fmt(y_med)}" stroke="#c00" '
                     f'stroke-width="2"/>')
        for out in st["outliers"]:
            parts.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(y_of(float(out)))}" r="3" '
                         f'fill="none" stroke="black"/>')
        parts.append(f'<text x="{_fmt(cx)}" y="{y1 + 20}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="12">{name}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_boxplot(groups: dict[str, list[float]], title: str, path,
                  y_label: str = "") -> None:
    svg = boxplot_svg(groups, title, y_label)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
