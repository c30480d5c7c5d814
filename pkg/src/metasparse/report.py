"""Comparison tables (CSV) and sparsity-profile charts (self-contained SVG).

``report`` is a pure function of the run directories it reads: the same
records always produce byte-identical outputs.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

REPORT_SCHEMA = "# metasparse-report v1"

SVG_WIDTH, SVG_HEIGHT, SVG_MARGIN = 640, 360, 40


def load_run(run_dir: str | Path) -> dict:
    """Summary plus per-seed profile rows of one persisted run directory."""
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    profiles = {}
    for seed_dir in sorted(run_dir.glob("seed*")):
        rows = []
        with open(seed_dir / "profile.csv") as fh:
            header = fh.readline().strip()
            if not header.startswith("#"):
                raise ValueError(f"{seed_dir}: profile.csv lacks its schema header")
            for row in csv.DictReader(fh):
                rows.append({k: float(v) for k, v in row.items()})
        profiles[seed_dir.name] = rows
    summary["profiles"] = profiles
    return summary


def comparison_table(summaries: list[dict]) -> list[list[str]]:
    """Rows of per-task mean ± std and sparsity columns, one row per run."""
    if not summaries:
        raise ValueError("report needs at least one run record")
    tasks = summaries[0]["tasks"]
    for s in summaries[1:]:
        if s["tasks"] != tasks:
            raise ValueError(f"incompatible task sets: {s['tasks']} vs {tasks}")
    header = ["config_hash", "mode"]
    for tid in tasks:
        header += [f"{tid}_mean", f"{tid}_std"]
    header += ["parameter_sparsity_mean", "parameter_sparsity_std",
               "group_sparsity_mean", "group_sparsity_std",
               "compression_ratio_mean", "speed_up_mean", "achieved_budget_mean"]
    rows = [header]
    for s in summaries:
        row = [s["config_hash"], s["mode"]]
        for tid in tasks:
            stat = s["per_task_test_loss"][tid]
            row += [f"{stat['mean']:.6f}", f"{stat['std']:.6f}"]
        row += [f"{s['parameter_sparsity']['mean']:.4f}", f"{s['parameter_sparsity']['std']:.4f}",
                f"{s['group_sparsity']['mean']:.4f}", f"{s['group_sparsity']['std']:.4f}",
                f"{s['compression_ratio']['mean']:.4f}", f"{s['speed_up']['mean']:.4f}",
                f"{s['achieved_budget']['mean']:.4f}" if "achieved_budget" in s else ""]
        rows.append(row)
    return rows


def profile_chart(summaries: list[dict], metric: str = "parameter_sparsity") -> str:
    """Minimal SVG line chart of ``metric`` against epoch across all runs/seeds."""
    series = []
    for s in summaries:
        for seed_name, rows in s["profiles"].items():
            pts = [(r["epoch"], r[metric]) for r in rows if metric in r]
            if pts:
                series.append((f"{s['config_hash']}/{seed_name}", pts))
    if not series:
        raise ValueError(f"no profile rows carry metric {metric!r}")
    max_epoch = max(p[0] for _, pts in series for p in pts)
    max_value = max(100.0, max(p[1] for _, pts in series for p in pts))

    def sx(e):
        return SVG_MARGIN + (SVG_WIDTH - 2 * SVG_MARGIN) * (e / max_epoch if max_epoch else 0.0)

    def sy(v):
        return SVG_HEIGHT - SVG_MARGIN - (SVG_HEIGHT - 2 * SVG_MARGIN) * v / max_value

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'data-metric="{metric}" data-max-epoch="{max_epoch:g}">',
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<line x1="{SVG_MARGIN}" y1="{SVG_HEIGHT - SVG_MARGIN}" x2="{SVG_WIDTH - SVG_MARGIN}" '
        f'y2="{SVG_HEIGHT - SVG_MARGIN}" stroke="black"/>',
        f'<line x1="{SVG_MARGIN}" y1="{SVG_MARGIN}" x2="{SVG_MARGIN}" '
        f'y2="{SVG_HEIGHT - SVG_MARGIN}" stroke="black"/>',
        f'<text x="{SVG_WIDTH // 2}" y="{SVG_HEIGHT - 8}" font-size="12" '
        f'text-anchor="middle">epoch</text>',
        f'<text x="12" y="{SVG_HEIGHT // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 12 {SVG_HEIGHT // 2})">{metric} (%)</text>',
    ]
    for i, (name, pts) in enumerate(series):
        coords = " ".join(f"{sx(e):.2f},{sy(v):.2f}" for e, v in pts)
        color = palette[i % len(palette)]
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5" data-series="{name}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def report(run_dirs: list[str | Path], out_dir: str | Path) -> dict[str, Path]:
    """Aggregate run directories into comparison CSV plus profile SVG charts."""
    summaries = [load_run(d) for d in run_dirs]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "comparison.csv"
    with open(table_path, "w", newline="") as fh:
        fh.write(REPORT_SCHEMA + "\n")
        csv.writer(fh).writerows(comparison_table(summaries))
    chart_path = out_dir / "sparsity_profile.svg"
    chart_path.write_text(profile_chart(summaries))
    return {"table": table_path, "chart": chart_path}
