"""Tables (CSV) and grouped bar charts (SVG) from a benchmark report."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from clab.errors import UsageError

VARIANT_LABELS = {"none": "Random init", "supervised": "Supervised", "moco": "MoCo",
                  "mocotp": "MoCoTP"}
PROTOCOL_LABELS = {"knn": "k-NN", "linear": "Linear probe", "finetune": "Finetune"}
TABLE_METRIC = "macro_f1"


def fraction_label(f: float) -> str:
    return f"{f * 100:g}%"


def format_cell(entry: dict | None, metric: str = TABLE_METRIC) -> str:
    """``mean (sd)`` in percent with two decimals; sd left out for single runs."""
    if entry is None or metric not in entry:
        return "n/a"
    m = entry[metric]
    text = f"{100 * m['mean']:.2f}"
    if m["sd"] is not None:
        text += f" ({100 * m['sd']:.2f})"
    return text


def _layout(report: dict):
    groups = report.get("groups", [])
    variants, protocols, fractions = [], [], []
    for g in groups:
        for lst, v in ((variants, g["variant"]), (protocols, g["protocol"]), (fractions, g["fraction"])):
            if v not in lst:
                lst.append(v)
    fractions.sort()
    index = {(g["variant"], g["protocol"], g["fraction"]): g for g in groups}
    return variants, protocols, fractions, index


def table_csv(report: dict, protocol: str, metric: str = TABLE_METRIC) -> str:
    variants, _, fractions, index = _layout(report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant"] + [fraction_label(f) for f in fractions])
    for v in variants:
        row = [VARIANT_LABELS.get(v, v)]
        row += [format_cell(index.get((v, protocol, f)), metric) for f in fractions]
        w.writerow(row)
    return buf.getvalue()


def write_tables(report: dict, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _, protocols, _, _ = _layout(report)
    paths = []
    for p in protocols:
        path = out / f"{p}.csv"
        path.write_text(table_csv(report, p), encoding="utf-8")
        paths.append(path)
    return paths


def bar_chart_svg(report: dict, protocol: str, metric: str = TABLE_METRIC) -> bytes:
    """Grouped bars: x = label fraction, one bar per variant, error bars = sd."""
    from matplotlib import rc_context
    from matplotlib.figure import Figure

    variants, _, fractions, index = _layout(report)
    rc = {"svg.hashsalt": "clab", "svg.fonttype": "path", "font.family": "DejaVu Sans",
          "font.size": 9}
    with rc_context(rc):
        fig = Figure(figsize=(5.0, 3.2))
        ax = fig.add_subplot()
        width = 0.8 / max(1, len(variants))
        x = np.arange(len(fractions))
        for j, v in enumerate(variants):
            means, sds = [], []
            for f in fractions:
                e = index.get((v, protocol, f))
                m = e.get(metric) if e else None
                means.append(100 * m["mean"] if m else 0.0)
                sds.append(100 * m["sd"] if m and m["sd"] is not None else 0.0)
            ax.bar(x + (j - (len(variants) - 1) / 2) * width, means, width,
                   yerr=sds, capsize=2, label=VARIANT_LABELS.get(v, v))
        ax.set_xticks(x, [fraction_label(f) for f in fractions])
        ax.set_xlabel("Label fraction")
        ax.set_ylabel("Macro F1 (%)" if metric == "macro_f1" else metric)
        ax.set_ylim(0, 100)
        ax.set_title(PROTOCOL_LABELS.get(protocol, protocol))
        ax.legend(fontsize=7, loc="upper left")
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def emit_report(report_dir: str | Path, out: str | Path | None = None) -> list[Path]:
    """Write ``tables/<protocol>.csv`` and ``figures/<protocol>.svg`` for a report directory."""
    report_dir = Path(report_dir)
    path = report_dir / "report.json"
    if not path.is_file():
        raise UsageError(f"no report found at {path}")
    report = json.loads(path.read_text())
    if not any(g.get(TABLE_METRIC) for g in report.get("groups", [])):
        raise UsageError(f"report {path} has no completed runs")
    out = Path(out) if out is not None else report_dir
    written = write_tables(report, out / "tables")
    (out / "figures").mkdir(parents=True, exist_ok=True)
    _, protocols, _, _ = _layout(report)
    for p in protocols:
        svg = out / "figures" / f"{p}.svg"
        svg.write_bytes(bar_chart_svg(report, p))
        written.append(svg)
    return written
