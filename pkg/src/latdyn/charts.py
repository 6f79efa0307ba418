"""Minimal deterministic SVG line charts.

Hand-rolled so that rerunning a command writes byte-identical files (no
timestamps, no library version strings). Good enough for loss curves and
per-step cost traces.
"""

from __future__ import annotations

_PALETTE = ("#1f6feb", "#d1242f", "#1a7f37", "#9a6700", "#8250df", "#bf3989")
_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 30, 40


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_line_chart(path, series: dict, title: str = "", x_label: str = "",
                     y_label: str = "", markers: dict | None = None) -> None:
    """Write one SVG with a polyline per named series.

    `markers` maps labels to x positions drawn as vertical dashed lines.
    """
    pts = [(name, list(map(float, ys))) for name, ys in series.items() if len(ys) > 0]
    if not pts:
        raise ValueError("write_line_chart needs at least one nonempty series")
    all_y = [y for _, ys in pts for y in ys]
    y_min, y_max = min(all_y), max(all_y)
    if y_max == y_min:
        y_max = y_min + 1.0
    x_max = max(len(ys) - 1 for _, ys in pts)
    x_max = max(x_max, 1)

    def sx(x):
        return _ML + (x / x_max) * (_W - _ML - _MR)

    def sy(y):
        return _H - _MB - ((y - y_min) / (y_max - y_min)) * (_H - _MT - _MB)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" '
           'stroke="black" stroke-width="1"/>',
           f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" '
           'stroke="black" stroke-width="1"/>']
    if title:
        out.append(f'<text x="{_W // 2}" y="18" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="13">{title}</text>')
    if x_label:
        out.append(f'<text x="{_W // 2}" y="{_H - 8}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{x_label}</text>')
    if y_label:
        out.append(f'<text x="14" y="{_H // 2}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11" '
                   f'transform="rotate(-90 14 {_H // 2})">{y_label}</text>')
    out.append(f'<text x="{_ML - 6}" y="{_H - _MB + 4}" text-anchor="end" '
               f'font-family="sans-serif" font-size="10">{_fmt(y_min)}</text>')
    out.append(f'<text x="{_ML - 6}" y="{_MT + 4}" text-anchor="end" '
               f'font-family="sans-serif" font-size="10">{_fmt(y_max)}</text>')
    out.append(f'<text x="{_ML}" y="{_H - _MB + 14}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="10">0</text>')
    out.append(f'<text x="{_W - _MR}" y="{_H - _MB + 14}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="10">{x_max}</text>')

    for label, x in (markers or {}).items():
        out.append(f'<line x1="{_fmt(sx(x))}" y1="{_MT}" x2="{_fmt(sx(x))}" '
                   f'y2="{_H - _MB}" stroke="#666" stroke-width="1" '
                   'stroke-dasharray="4 3"/>')
        out.append(f'<text x="{_fmt(sx(x) + 3)}" y="{_MT + 12}" '
                   f'font-family="sans-serif" font-size="10">{label}</text>')

    for i, (name, ys) in enumerate(pts):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in enumerate(ys))
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                   'stroke-width="1.5"/>')
        out.append(f'<text x="{_W - _MR - 4}" y="{_MT + 14 * (i + 1)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10" fill="{color}">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")
