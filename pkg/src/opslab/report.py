"""Regret-versus-sample-size charts as plain SVG, one per (env, regime, k)."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from .sweep import summarize, write_summary

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
           "#bcbd22"]
WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 60, "right": 170, "top": 40, "bottom": 50}


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_svg(series: dict[str, list[dict]], title: str) -> str:
    """``series``: method -> rows with ``n``, ``mean``, ``stderr`` (sorted by n)."""
    ns = sorted({r["n"] for rows in series.values() for r in rows})
    x_lo, x_hi = math.log10(ns[0]), math.log10(ns[-1])
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    y_hi = max(1.0, max(r["mean"] + r["stderr"] for rows in series.values() for r in rows))
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(n):
        return MARGIN["left"] + (math.log10(n) - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return MARGIN["top"] + (1 - min(max(v, 0.0), y_hi) / y_hi) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for n in ns:
        out.append(f'<line x1="{_fmt(px(n))}" y1="{y0}" x2="{_fmt(px(n))}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(n))}" y="{y0 + 18}" text-anchor="middle">{n}</text>')
    for i in range(5):
        v = y_hi * i / 4
        out.append(f'<line x1="{x0 - 5}" y1="{_fmt(py(v))}" x2="{x0}" y2="{_fmt(py(v))}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{_fmt(py(v) + 4)}" text-anchor="end">{v:.2f}</text>')
    out.append(f'<text x="{x0 + pw / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">episodes (log scale)</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.0f})">normalized regret</text>')
    for i, (method, rows) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        upper = " ".join(f"{_fmt(px(r['n']))},{_fmt(py(r['mean'] + r['stderr']))}" for r in rows)
        lower = " ".join(f"{_fmt(px(r['n']))},{_fmt(py(r['mean'] - r['stderr']))}" for r in reversed(rows))
        out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.18" stroke="none"/>')
        line = " ".join(f"{_fmt(px(r['n']))},{_fmt(py(r['mean']))}" for r in rows)
        dash = ' stroke-dasharray="5,4"' if method == "random" else ""
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = WIDTH - MARGIN["right"] + 14
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"'
                   f'{dash}/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(method)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(csv_path, out_dir) -> list[Path]:
    """One SVG per (env, regime, k) plus ``summary.json``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(csv_path)
    if not summary:
        raise ValueError(f"{csv_path}: no result rows")
    write_summary(csv_path, out / "summary.json")
    charts: dict[tuple, dict[str, list]] = {}
    for row in summary:
        charts.setdefault((row["env"], row["regime"], row["k"]), {}).setdefault(row["method"], []).append(row)
    written = [out / "summary.json"]
    for (env, regime, k), series in sorted(charts.items()):
        for rows in series.values():
            rows.sort(key=lambda r: r["n"])
        path = out / f"regret_{env}_{regime}_k{k}.svg"
        path.write_text(render_svg(series, f"{env} / {regime}: top-{k} regret"))
        written.append(path)
    return written
