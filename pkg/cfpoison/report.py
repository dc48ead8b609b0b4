"""Report emission: canonical JSON, flat CSV tables and SVG figures."""

import json
from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .models import DataValidationError, ExperimentReport  # noqa: E402
from .utils import to_jsonable  # noqa: E402

FORMATS = ("json", "csv", "svg")
CSV_COLUMNS = ["fold", "budget", "metric", "count", "median", "p_value", "stars"]

plt.rcParams["svg.hashsalt"] = "cfpoison"
plt.rcParams["svg.fonttype"] = "none"


def canonical_json(doc) -> str:
    """Sorted keys, two-space indent, 12 significant digits"""
    return json.dumps(to_jsonable(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(doc, path: Path) -> Path:
    path = Path(path)
    path.write_text(canonical_json(doc))
    return path


def load_report(path: Path) -> ExperimentReport:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"report not found: {path}")
    with open(path) as f:
        return ExperimentReport.from_dict(json.load(f))


def report_frame(report: ExperimentReport) -> pd.DataFrame:
    """One row per metric record"""
    rows = [
        {
            "fold": r.fold,
            "budget": r.budget,
            "metric": r.metric,
            "count": len(r.values),
            "median": r.median,
            "p_value": r.p_value,
            "stars": r.stars,
        }
        for r in report.records
    ]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def write_csv(report: ExperimentReport, path: Path) -> Path:
    path = Path(path)
    report_frame(report).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return path


def _save_svg(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "cfpoison"})
    plt.close(fig)
    return path


def write_budget_svg(report: ExperimentReport, path: Path) -> Path:
    """Budget vs median curves per metric with a band of one standard deviation over folds"""
    frame = report_frame(report)
    per_fold = frame[frame["fold"] >= 0]
    metrics = sorted(per_fold["metric"].unique())
    fig, ax = plt.subplots(figsize=(6, 4))
    if not metrics:
        ax.text(0.5, 0.5, "no records", ha="center", va="center")
    for metric in metrics:
        rows = per_fold[per_fold["metric"] == metric]
        summary = rows.groupby("budget")["median"].agg(["median", "std"]).sort_index()
        budgets = summary.index.to_numpy(dtype=float)
        centre = summary["median"].to_numpy(dtype=float)
        spread = np.nan_to_num(summary["std"].to_numpy(dtype=float))
        ax.plot(budgets, centre, marker="o", label=metric)
        ax.fill_between(budgets, centre - spread, centre + spread, alpha=0.2)
    ax.set_xlabel("poison budget (fraction of training data)")
    ax.set_ylabel("median over folds")
    if metrics:
        ax.legend(fontsize="small")
    fig.tight_layout()
    return _save_svg(fig, path)


def write_sparsity_svg(clean: Iterable[int], poisoned: Iterable[int], path: Path) -> Path:
    """Side-by-side distributions of alarm explanation sparsity"""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([list(clean), list(poisoned)])
    ax.set_xticks([1, 2], ["clean", "poisoned"])
    ax.set_ylabel("cost of recourse (sparsity)")
    fig.tight_layout()
    return _save_svg(fig, path)


def emit_report(
    report: ExperimentReport, formats: Iterable[str], out_dir: Path, stem: str = "report"
) -> list[Path]:
    """
    Write a report in the requested formats.

    Returns:
        Written paths; the timing sidecar is always written next to the JSON.
    """
    formats = list(formats)
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise DataValidationError(f"unknown format '{unknown[0]}' (use {', '.join(FORMATS)})")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        written.append(write_json(report.to_dict(), out_dir / f"{stem}.json"))
        timing = out_dir / f"{stem}.timing.json"
        timing.write_text(json.dumps(report.timing, sort_keys=True, indent=2) + "\n")
        written.append(timing)
    if "csv" in formats:
        written.append(write_csv(report, out_dir / f"{stem}.csv"))
    if "svg" in formats:
        written.append(write_budget_svg(report, out_dir / f"{stem}.svg"))
    return written
