"""Static audit report: Markdown tables plus per-group SVG histograms.

Everything is generated from the scores CSV (and optionally a feature
CSV), with fixed formatting and no timestamps, so regenerating a report
from the same inputs is byte-identical.
"""

import re
from pathlib import Path

import numpy as np

from .errors import IOFailure, ValidationError

REPORT_NAME = "report.md"
HIST_BINS = 20

_CELL_ID_RE = re.compile(r"^(?P<well>[^_]+)_s(?P<site>\d+)_c\d+$")


def parse_cell_site(cell_id):
    """Split a cell id like ``B02_s3_c014`` into (well, site)."""
    m = _CELL_ID_RE.match(cell_id)
    if m is None:
        raise ValidationError(f"cell id {cell_id!r} does not encode well and site")
    return m.group("well"), int(m.group("site"))


def group_scores(records):
    """Bucket score records by (dose, site), sorted keys, stable membership."""
    groups = {}
    for rec in sorted(records, key=lambda r: r.cell_id):
        _, site = parse_cell_site(rec.cell_id)
        groups.setdefault((rec.label, site), []).append(rec)
    return dict(sorted(groups.items()))


def svg_histogram(values, title, bins=HIST_BINS):
    """Histogram of values in [0, 1] as a standalone SVG string."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise ValidationError("histogram needs a non-empty 1D value array")
    counts, _ = np.histogram(np.clip(vals, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    top = max(int(counts.max()), 1)

    width, height = 360, 220
    left, right, floor, ceil = 40.0, 340.0, 190.0, 40.0
    span = right - left
    bar_w = span / bins

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for i, count in enumerate(counts):
        if count == 0:
            continue
        bar_h = (floor - ceil) * count / top
        x = left + i * bar_w
        parts.append(
            f'<rect x="{x:.2f}" y="{floor - bar_h:.2f}" width="{bar_w - 2:.2f}" '
            f'height="{bar_h:.2f}" fill="#4878a8"/>')
    parts.append(
        f'<line x1="{left}" y1="{floor}" x2="{right}" y2="{floor}" '
        f'stroke="black" stroke-width="1"/>')
    parts.append(
        f'<line x1="{left}" y1="{ceil}" x2="{left}" y2="{floor}" '
        f'stroke="black" stroke-width="1"/>')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = left + span * tick
        parts.append(
            f'<line x1="{x:.2f}" y1="{floor}" x2="{x:.2f}" y2="{floor + 4}" '
            f'stroke="black" stroke-width="1"/>')
        parts.append(
            f'<text x="{x:.2f}" y="{floor + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{tick:g}</text>')
    parts.append(
        f'<text x="{left - 6}" y="{ceil + 4}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{top}</text>')
    parts.append(
        f'<text x="{left - 6}" y="{floor}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">0</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _md_table(header, rows):
    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines)


def build_report(scores, features=None):
    """Assemble report stats from score records and an optional FeatureMatrix."""
    if not scores:
        raise ValidationError("cannot report on an empty score list")
    groups = group_scores(scores)
    score_vals = np.array([r.score for r in scores], dtype=np.float64)
    overall = {
        "cells": len(scores),
        "mean_score": float(score_vals.mean()),
        "degenerate": sum(r.degenerate for r in scores),
        "kept_fraction": float(np.mean([r.keep for r in scores])),
        "accuracy": float(np.mean([r.pred == r.label for r in scores])),
    }
    group_rows = []
    for (dose, site), members in groups.items():
        vals = np.array([r.score for r in members], dtype=np.float64)
        group_rows.append({
            "dose": dose,
            "site": site,
            "n": len(members),
            "mean_score": float(vals.mean()),
            "degenerate": sum(r.degenerate for r in members),
            "kept_fraction": float(np.mean([r.keep for r in members])),
            "values": vals,
        })
    report = {"overall": overall, "groups": group_rows}
    if features is not None:
        norms = np.linalg.norm(features.values, axis=1)
        by_label = {}
        for label in sorted(set(int(v) for v in features.labels)):
            sel = features.labels == label
            by_label[label] = float(norms[sel].mean())
        report["features"] = {
            "rows": int(features.values.shape[0]),
            "columns": int(features.values.shape[1]),
            "mean_norm_by_label": by_label,
        }
    return report


def write_report(out_dir, scores, features=None):
    """Write report.md and one histogram SVG per (dose, site) group.

    Returns the assembled stats dict so callers can print the headline
    mean score.
    """
    report = build_report(scores, features)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create report directory {out}: {exc}") from exc

    overall = report["overall"]
    lines = [
        "# Grad-CAMO audit report",
        "",
        "## Overview",
        "",
        _md_table(
            ["metric", "value"],
            [
                ["cells scored", overall["cells"]],
                ["mean Grad-CAMO score", f"{overall['mean_score']:.4f}"],
                ["degenerate maps", overall["degenerate"]],
                ["kept fraction", f"{overall['kept_fraction']:.4f}"],
                ["prediction accuracy", f"{overall['accuracy']:.4f}"],
            ]),
        "",
        "## Scores by dose and site",
        "",
    ]
    group_table = []
    for g in report["groups"]:
        group_table.append([
            g["dose"], g["site"], g["n"], f"{g['mean_score']:.4f}",
            g["degenerate"], f"{g['kept_fraction']:.4f}",
        ])
    lines.append(_md_table(
        ["dose", "site", "n", "mean score", "degenerate", "kept"], group_table))
    lines.append("")
    for g in report["groups"]:
        name = f"hist_dose{g['dose']}_site{g['site']}.svg"
        title = f"dose {g['dose']}, site {g['site']} (n={g['n']})"
        svg = svg_histogram(g["values"], title)
        try:
            (out / name).write_text(svg, encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write histogram {out / name}: {exc}") from exc
        lines.append(f"![{title}]({name})")
    lines.append("")

    if "features" in report:
        feats = report["features"]
        lines.extend([
            "## Features",
            "",
            _md_table(
                ["metric", "value"],
                [["rows", feats["rows"]], ["columns", feats["columns"]]]),
            "",
            _md_table(
                ["label", "mean feature norm"],
                [[label, f"{norm:.4f}"]
                 for label, norm in feats["mean_norm_by_label"].items()]),
            "",
        ])

    try:
        (out / REPORT_NAME).write_text("\n".join(lines), encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write report {out / REPORT_NAME}: {exc}") from exc
    return report
