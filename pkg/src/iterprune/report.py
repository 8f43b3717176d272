"""Run comparison tables and SVG accuracy-vs-parameters charts.

Accuracies are the final-epoch test accuracy of each round, not the best
epoch seen during retraining.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .errors import ConfigError
from .metrics import DropResult, compression_at_drop

DROPS = (0.0, 1.0, 3.0, 5.0)
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass
class RunSummary:
    label: str
    model: str
    baseline_acc: float
    results: dict  # drop -> DropResult


def summarize(label: str, model: str, records: Sequence, drops: Sequence[float] = DROPS) -> RunSummary:
    base = records[0].top1_acc
    return RunSummary(label, model, base, {d: compression_at_drop(records, base, d) for d in drops})


def flop_ratios(runs: Sequence[RunSummary], baseline: RunSummary) -> dict:
    """Per run and drop, flops of the selected round over the baseline run's selected round."""
    for r in runs:
        if r.model != baseline.model:
            raise ConfigError(f"run {r.label} uses {r.model}, baseline {baseline.label} uses {baseline.model}")
    out = {}
    for r in runs:
        out[r.label] = {d: r.results[d].flops / baseline.results[d].flops for d in r.results}
    return out


def comparison_rows(runs: Sequence[RunSummary], baseline: RunSummary) -> list:
    """Header plus one row per metric; one column per run."""
    ratios = flop_ratios(runs, baseline)
    rows = [["metric"] + [r.label for r in runs]]
    rows.append(["baseline top-1 (%)"] + [f"{r.baseline_acc:.2f}" for r in runs])
    for d in runs[0].results:
        rows.append([f"compression @ {d:g}% drop"] + [_fmt_ratio(r.results[d]) for r in runs])
    for d in runs[0].results:
        rows.append([f"flops vs {baseline.label} @ {d:g}% drop"] + [f"{ratios[r.label][d]:.3f}" for r in runs])
    return rows


def _fmt_ratio(res: DropResult) -> str:
    return f"{res.ratio:.2f}x" if res.qualified else "1.00x (none)"


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def rows_to_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# -- SVG ----------------------------------------------------------------------------


def render_svg(series: Mapping[str, Sequence], title: str = "", width: int = 640, height: int = 400) -> str:
    """Line chart of top-1 accuracy against remaining parameters (log-scaled x, reversed)."""
    ml, mr, mt, mb = 60, 20, 30, 45
    pts = [(rec.remaining_pct, rec.top1_acc) for recs in series.values() for rec in recs]
    xs = [math.log10(max(p, 1e-3)) for p, _ in pts] or [0.0, 2.0]
    ys = [a for _, a in pts] or [0.0, 100.0]
    x_lo, x_hi = min(xs), max(max(xs), min(xs) + 1e-6)
    y_lo, y_hi = max(0.0, min(ys) - 2), min(100.0, max(ys) + 2)
    if y_hi <= y_lo:
        y_hi = y_lo + 1

    def sx(pct):
        v = math.log10(max(pct, 1e-3))
        return ml + (x_hi - v) / (x_hi - x_lo) * (width - ml - mr)

    def sy(acc):
        return height - mb - (acc - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
           f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle">remaining parameters (%)</text>',
           f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {height / 2:.0f})">top-1 accuracy (%)</text>']
    for pct in (100, 50, 20, 10, 5, 2, 1, 0.5, 0.2, 0.1):
        if x_lo - 1e-9 <= math.log10(pct) <= x_hi + 1e-9:
            x = sx(pct)
            out.append(f'<line x1="{x:.1f}" y1="{height - mb}" x2="{x:.1f}" y2="{height - mb + 4}" stroke="black"/>')
            out.append(f'<text x="{x:.1f}" y="{height - mb + 16}" text-anchor="middle">{pct:g}</text>')
    for i in range(6):
        acc = y_lo + i * (y_hi - y_lo) / 5
        y = sy(acc)
        out.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end">{acc:.1f}</text>')
    for n, (label, recs) in enumerate(series.items()):
        color = _COLORS[n % len(_COLORS)]
        coords = " ".join(f"{sx(r.remaining_pct):.1f},{sy(r.top1_acc):.1f}" for r in recs)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        for r in recs:
            out.append(f'<circle cx="{sx(r.remaining_pct):.1f}" cy="{sy(r.top1_acc):.1f}" r="2.5" fill="{color}"/>')
        ly = mt + 14 * n + 6
        out.append(f'<line x1="{width - mr - 90}" y1="{ly}" x2="{width - mr - 70}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - mr - 65}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, series: Mapping[str, Sequence], title: str = "") -> Path:
    path = Path(path)
    path.write_text(render_svg(series, title))
    return path
