"""Aggregate ``results.csv`` files into per-method summaries."""
import csv
import glob
import math
import os

import numpy as np

from ..exceptions import ConfigurationError
from .pipeline import RESULT_COLUMNS

_PER_TRIAL = {"trial", "seed", "data_seed", "status", "best_val_score", "best_epoch", "balanced",
              "worst", "iid", "wall_clock", "failed_stage", "error"}
METHOD_COLUMNS = [c for c in RESULT_COLUMNS if c not in _PER_TRIAL]
METRICS = ("balanced", "worst", "iid", "best_val_score")


def collect_rows(results_dir):
    """All rows of every ``results.csv`` below ``results_dir``."""
    paths = sorted(glob.glob(os.path.join(results_dir, "**", "results.csv"), recursive=True))
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def mean_std(values):
    """Mean and sample standard deviation; std is None for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), (float(arr.std(ddof=1)) if arr.size > 1 else None)


def summarize(rows):
    """Group ok rows by method (every config column except seeds) and average metrics."""
    groups = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        key = tuple(row[c] for c in METHOD_COLUMNS)
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        entry = dict(zip(METHOD_COLUMNS, key))
        entry["n"] = len(members)
        for m in METRICS:
            entry[f"{m}_mean"], entry[f"{m}_std"] = mean_std([float(r[m]) for r in members])
        out.append(entry)
    return out


def _fmt(x, scale=100.0):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{scale * x:.2f}"


def write_summary_csv(summary, path):
    cols = METHOD_COLUMNS + ["n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        for entry in summary:
            w.writerow({c: ("" if entry.get(c) is None else entry[c]) for c in cols})


def markdown_table(summary):
    # only show the config columns that actually differ between methods
    varying = [c for c in METHOD_COLUMNS if len({e[c] for e in summary}) > 1] or ["mode"]
    head = varying + ["n", "balanced (%)", "worst (%)", "iid (%)"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for e in summary:
        cells = [str(e[c]) for c in varying] + [str(e["n"])]
        for m in ("balanced", "worst", "iid"):
            std = e[f"{m}_std"]
            cells.append(_fmt(e[f"{m}_mean"]) + ("" if std is None else f" ± {_fmt(std)}"))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def report(results_dir, out_dir=None):
    """Write ``summary.csv``, ``scatter.csv`` and ``report.md``; returns their paths."""
    rows = collect_rows(results_dir)
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise ConfigurationError(f"no successful trials under {results_dir}")
    out_dir = out_dir or results_dir
    os.makedirs(out_dir, exist_ok=True)
    summary = summarize(rows)
    paths = {"summary": os.path.join(out_dir, "summary.csv"),
             "scatter": os.path.join(out_dir, "scatter.csv"),
             "markdown": os.path.join(out_dir, "report.md")}
    write_summary_csv(summary, paths["summary"])
    with open(paths["scatter"], "w") as fh:
        fh.write("trial,best_val_score,balanced,worst,iid\n")
        for r in ok:
            fh.write(f"{r['trial']},{r['best_val_score']},{r['balanced']},{r['worst']},{r['iid']}\n")
    failed = len(rows) - len(ok)
    with open(paths["markdown"], "w") as fh:
        fh.write(f"# Results\n\n{len(ok)} successful trials, {failed} failed.\n\n")
        fh.write(markdown_table(summary) + "\n")
    return paths
