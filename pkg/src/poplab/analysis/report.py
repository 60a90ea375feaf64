"""CSV tables, minimal SVG line charts and matplotlib PNG renderings."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _finite(series: Mapping) -> list:
    vals = []
    for xs, ys in series.values():
        vals.extend((x, y) for x, y in zip(xs, ys) if math.isfinite(y))
    return vals


def svg_line_chart(series: Mapping[str, tuple], title: str = "", xlabel: str = "", ylabel: str = "",
                   width: int = 640, height: int = 400) -> str:
    """One ``<polyline>`` per series; non-finite points are dropped."""
    pad_l, pad_r, pad_t, pad_b = 60, 140, 30, 45
    pts = _finite(series)
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
        f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{escape(ylabel)}</text>',
        f'<text x="{pad_l - 6}" y="{pad_t + 4}" text-anchor="end" font-size="10">{y1:.4g}</text>',
        f'<text x="{pad_l - 6}" y="{pad_t + ph + 4}" text-anchor="end" font-size="10">{y0:.4g}</text>',
        f'<text x="{pad_l}" y="{pad_t + ph + 16}" text-anchor="middle" font-size="10">{x0:.4g}</text>',
        f'<text x="{pad_l + pw}" y="{pad_t + ph + 16}" text-anchor="middle" font-size="10">{x1:.4g}</text>',
    ]
    for i, (name, (xv, yv)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xv, yv) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = pad_t + 14 + 16 * i
        out.append(f'<text x="{pad_l + pw + 10}" y="{ly}" font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_png(path, series: Mapping[str, tuple], title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_chart(stem, series: Mapping[str, tuple], svg: bool = True, png: bool = True, **labels) -> list:
    """Write ``stem.svg`` and/or ``stem.png``; returns the paths written."""
    stem = Path(stem)
    written = []
    if svg:
        p = stem.with_suffix(".svg")
        p.write_text(svg_line_chart(series, **labels))
        written.append(p)
    if png:
        p = stem.with_suffix(".png")
        plot_png(p, series, **labels)
        written.append(p)
    return written
