"""Result-table and plot emission: CSV, markdown, and deterministic SVG charts."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IoFailure
from .metrics import NLG_COLUMNS, MetricsRecord


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _svg_line_chart(series: dict[str, list[float]], title: str, path: Path) -> None:
    """Minimal polyline chart; hand-rolled so output bytes are reproducible."""
    width, height, margin = 480, 280, 40
    body: list[str] = []
    finite = [v for values in series.values() for v in values if np.isfinite(v)]
    if finite:
        lo, hi = min(finite), max(finite)
        if hi == lo:
            hi = lo + 1.0
        max_len = max(len(v) for v in series.values())
        palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
        for i, (name, values) in enumerate(sorted(series.items())):
            if not values:
                continue
            points = []
            for j, v in enumerate(values):
                x = margin + (width - 2 * margin) * (j / max(max_len - 1, 1))
                y = height - margin - (height - 2 * margin) * ((v - lo) / (hi - lo))
                points.append(f"{x:.1f},{y:.1f}")
            color = palette[i % len(palette)]
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(points)}"/>')
            body.append(f'<text x="{margin}" y="{margin - 24 + 12 * (i + 1)}" font-size="10" fill="{color}">{name}</text>')
        body.append(f'<text x="{margin}" y="{height - 8}" font-size="10">min {_fmt(lo)} / max {_fmt(hi)}</text>')
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f'<text x="{margin}" y="16" font-size="12">{title}</text>'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>'
        + "".join(body)
        + "</svg>"
    )
    path.write_text(svg, encoding="utf-8")


def _nlg_csv(records: list[MetricsRecord]) -> str:
    lines = ["fold," + ",".join(NLG_COLUMNS)]
    for record in records:
        row = record.nlg_row()
        lines.append(str(record.fold) + "," + ",".join(_fmt(row[c]) for c in NLG_COLUMNS))
    means = {c: float(np.mean([r.nlg_row()[c] for r in records])) for c in NLG_COLUMNS}
    lines.append("mean," + ",".join(_fmt(means[c]) for c in NLG_COLUMNS))
    return "\n".join(lines) + "\n"


def _ce_csv(records: list[MetricsRecord]) -> str:
    lines = ["fold,descriptor,precision,sensitivity,f1"]
    kinds: list[str] = []
    for record in records:
        for kind in record.ce:
            if kind not in kinds:
                kinds.append(kind)
    for record in records:
        for kind in kinds:
            if kind in record.ce:
                p, s, f1 = record.ce[kind]
                lines.append(f"{record.fold},{kind},{_fmt(p)},{_fmt(s)},{_fmt(f1)}")
    for kind in kinds:
        triples = [r.ce[kind] for r in records if kind in r.ce]
        p, s, f1 = (float(np.mean([t[i] for t in triples])) for i in range(3))
        lines.append(f"mean,{kind},{_fmt(p)},{_fmt(s)},{_fmt(f1)}")
    return "\n".join(lines) + "\n"


def _summary_md(records: list[MetricsRecord], significance: dict[str, tuple[float, float]] | None) -> str:
    lines = ["# Results", "", "## NLG metrics (per fold + mean)", ""]
    lines.append("| fold | " + " | ".join(NLG_COLUMNS) + " |")
    lines.append("|" + "---|" * (len(NLG_COLUMNS) + 1))
    for record in records:
        row = record.nlg_row()
        lines.append(f"| {record.fold} | " + " | ".join(_fmt(row[c]) for c in NLG_COLUMNS) + " |")
    means = {c: float(np.mean([r.nlg_row()[c] for r in records])) for c in NLG_COLUMNS}
    lines.append("| mean | " + " | ".join(_fmt(means[c]) for c in NLG_COLUMNS) + " |")
    lines.extend(["", "## Clinical efficacy (fold means)", ""])
    lines.append("| descriptor | precision | sensitivity | f1 |")
    lines.append("|---|---|---|---|")
    kinds: list[str] = []
    for record in records:
        for kind in record.ce:
            if kind not in kinds:
                kinds.append(kind)
    for kind in kinds:
        triples = [r.ce[kind] for r in records if kind in r.ce]
        p, s, f1 = (float(np.mean([t[i] for t in triples])) for i in range(3))
        lines.append(f"| {kind} | {_fmt(p)} | {_fmt(s)} | {_fmt(f1)} |")
    if significance:
        lines.extend(["", "## Paired t-tests vs baseline", ""])
        lines.append("| metric | t | p |")
        lines.append("|---|---|---|")
        for metric, (t, p) in significance.items():
            lines.append(f"| {metric} | {_fmt(t)} | {_fmt(p)} |")
    return "\n".join(lines) + "\n"


def emit_results(
    records: list[MetricsRecord],
    out_dir: str | Path,
    significance: dict[str, tuple[float, float]] | None = None,
) -> Path:
    """Write nlg.csv, ce.csv, summary.md, optional significance.csv, and loss plots."""
    if not records:
        raise IoFailure("EmptyInput: no metric records to emit")
    out_dir = Path(out_dir)
    plots = out_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    (out_dir / "nlg.csv").write_text(_nlg_csv(records), encoding="utf-8")
    (out_dir / "ce.csv").write_text(_ce_csv(records), encoding="utf-8")
    if significance is not None:
        lines = ["metric,t,p"] + [f"{m},{_fmt(t)},{_fmt(p)}" for m, (t, p) in significance.items()]
        (out_dir / "significance.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "summary.md").write_text(_summary_md(records, significance), encoding="utf-8")

    history_keys: list[str] = []
    for record in records:
        for key in record.histories:
            if key not in history_keys:
                history_keys.append(key)
    for key in history_keys:
        series = {f"fold{r.fold}": r.histories[key] for r in records if key in r.histories}
        _svg_line_chart(series, f"{key} vs epoch", plots / f"{key}.svg")
    return out_dir
