"""Small CSV/SVG emitters. SVG is written by hand so output is byte-stable."""

from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52")


def bar_chart_svg(
    series: Mapping[str, Mapping[int, float]],
    title: str,
    xlabel: str = "boxes per image",
    ylabel: str = "images",
    width: int = 720,
    height: int = 360,
) -> str:
    """Grouped bar chart, one group per integer bucket, one bar per series."""
    buckets = sorted({b for s in series.values() for b in s})
    names = list(series)
    ymax = max([v for s in series.values() for v in s.values()] + [1])
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    group_w = pw / max(len(buckets), 1)
    bar_w = group_w * 0.8 / max(len(names), 1)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for tick in range(5):
        v = ymax * tick / 4
        y = top + ph - ph * tick / 4
        out.append(f'<text x="{left - 5}" y="{y + 4:.1f}" text-anchor="end">{v:g}</text>')
    label_every = max(1, len(buckets) // 20)
    for gi, b in enumerate(buckets):
        gx = left + gi * group_w + group_w * 0.1
        for si, name in enumerate(names):
            v = series[name].get(b, 0)
            h = ph * v / ymax
            out.append(
                f'<rect x="{gx + si * bar_w:.2f}" y="{top + ph - h:.2f}" width="{bar_w:.2f}" '
                f'height="{h:.2f}" fill="{PALETTE[si % len(PALETTE)]}"><title>{escape(name)} {b}: {v:g}</title></rect>'
            )
        if gi % label_every == 0:
            out.append(f'<text x="{gx + group_w * 0.4:.2f}" y="{top + ph + 14}" text-anchor="middle">{b}</text>')
    for si, name in enumerate(names):
        lx = left + pw - 140
        ly = top + 5 + si * 16
        out.append(f'<rect x="{lx}" y="{ly}" width="10" height="10" fill="{PALETTE[si % len(PALETTE)]}"/>')
        out.append(f'<text x="{lx + 15}" y="{ly + 9}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def csv_text(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    lines = [",".join(header)]
    lines += [",".join(_cell(c) for c in row) for row in rows]
    return "\n".join(lines) + "\n"


def _cell(v: object) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)
