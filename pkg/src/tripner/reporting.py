"""Report generation: step-by-step F1 tables, per-type curves, threshold sweeps."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ReportError
from .metrics import StepMetrics

logger = logging.getLogger(__name__)


def load_series(run_dir: str | Path) -> list[StepMetrics]:
    """Read the per-step metrics a run wrote, ordered by step."""
    metrics_dir = Path(run_dir) / "metrics"
    if not metrics_dir.exists():
        raise ReportError(f"run {run_dir} has no metrics directory")
    series: list[StepMetrics] = []
    for path in sorted(metrics_dir.glob("step*.json"), key=lambda p: int(p.stem[4:])):
        payload = json.loads(path.read_text(encoding="utf-8"))
        series.append(
            StepMetrics(
                step=payload["step"],
                per_type=payload["per_type"],
                macro_f1=payload["macro_f1"],
                coarse_macro_f1=payload.get("coarse_macro_f1"),
                gap=payload.get("gap"),
            )
        )
    if not series:
        raise ReportError(f"run {run_dir} has no step metrics")
    found = [m.step for m in series]
    absent = [k for k in range(1, max(found) + 1) if k not in found]
    if absent:
        raise ReportError(f"run {run_dir} is missing step metrics for steps {absent}")
    return series


def run_mode(run_dir: str | Path) -> str:
    manifest = Path(run_dir) / "manifest.json"
    if manifest.exists():
        return json.loads(manifest.read_text(encoding="utf-8")).get("mode", "cl")
    return "cl"


def run_label(run_dir: str | Path) -> str:
    manifest = Path(run_dir) / "manifest.json"
    label = Path(run_dir).name
    if manifest.exists():
        payload = json.loads(manifest.read_text(encoding="utf-8"))
        tags = list(payload.get("ablations", []))
        composition = payload.get("composition")
        if composition and composition != "SET":
            tags.append(f"composition={composition}")
        if tags:
            label = f"{label} ({', '.join(tags)})"
    return label


def write_f1_table(
    out_path: str | Path,
    cl_runs: dict[str, list[StepMetrics]],
    noncl: list[StepMetrics] | None,
) -> Path:
    """CSV with one macro-F1 row per method, the upper bound, and gap rows."""
    if not cl_runs and noncl is None:
        raise ReportError("no runs to tabulate")
    lengths = {len(series) for series in cl_runs.values()}
    if noncl is not None:
        lengths.add(len(noncl))
    if len(lengths) != 1:
        raise ReportError(f"runs cover different step counts: {sorted(lengths)}")
    steps = lengths.pop()
    header = ["method"] + [f"step{k}" for k in range(1, steps + 1)]
    rows: list[list[str]] = []
    if noncl is not None:
        rows.append(["non-CL"] + [f"{m.macro_f1:.4f}" for m in noncl])
    for label, series in sorted(cl_runs.items()):
        rows.append([label] + [f"{m.macro_f1:.4f}" for m in series])
        if noncl is not None:
            gaps = [m.macro_f1 - u.macro_f1 for m, u in zip(series, noncl)]
            rows.append([f"delta {label}"] + [f"{g:+.4f}" for g in gaps])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    if noncl is None:
        logger.warning("no non-incremental run given; table has no delta rows")
    return out_path


def write_order_averaged_table(
    out_path: str | Path,
    cl_series: list[list[StepMetrics]],
    noncl_series: list[list[StepMetrics]],
) -> Path:
    """Average macro F1 across learning orders, as in the benchmark tables.

    Emits the averaged incremental row, the averaged upper-bound row, the gap
    of the averages, and (when the run counts pair up) the average of the
    per-order gaps; the two gap conventions are both reported because they
    differ in general.
    """
    if not cl_series:
        raise ReportError("order averaging needs at least one incremental run")
    lengths = {len(series) for series in cl_series + noncl_series}
    if len(lengths) != 1:
        raise ReportError(f"runs cover different step counts: {sorted(lengths)}")
    steps = lengths.pop()

    def mean_curve(group: list[list[StepMetrics]]) -> list[float]:
        return [
            sum(series[k].macro_f1 for series in group) / len(group)
            for k in range(steps)
        ]

    header = ["method"] + [f"step{k}" for k in range(1, steps + 1)]
    rows: list[list[str]] = []
    cl_mean = mean_curve(cl_series)
    rows.append(
        [f"CL mean of {len(cl_series)} orders"] + [f"{v:.4f}" for v in cl_mean]
    )
    if noncl_series:
        noncl_mean = mean_curve(noncl_series)
        rows.append(
            [f"non-CL mean of {len(noncl_series)} orders"]
            + [f"{v:.4f}" for v in noncl_mean]
        )
        rows.append(
            ["delta of averages"]
            + [f"{c - u:+.4f}" for c, u in zip(cl_mean, noncl_mean)]
        )
        if len(noncl_series) == len(cl_series):
            per_order = [
                [c[k].macro_f1 - u[k].macro_f1 for c, u in zip(cl_series, noncl_series)]
                for k in range(steps)
            ]
            rows.append(
                ["average of per-order deltas"]
                + [f"{sum(col) / len(col):+.4f}" for col in per_order]
            )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return out_path


def plot_type_curves(
    out_path: str | Path, label: str, series: list[StepMetrics]
) -> Path:
    """Per-type F1 over steps, plus the dashed macro curve."""
    steps = [m.step for m in series]
    type_names = sorted({name for m in series for name in m.per_type})
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in type_names:
        scores = [m.per_type.get(name, {}).get("f1") for m in series]
        xs = [s for s, f1 in zip(steps, scores) if f1 is not None]
        ys = [f1 for f1 in scores if f1 is not None]
        ax.plot(xs, ys, marker="o", label=name)
    ax.plot(steps, [m.macro_f1 for m in series], "k--", marker="s", label="macro")
    ax.set_xlabel("learning step")
    ax.set_ylabel("F1")
    ax.set_xticks(steps)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(label)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def load_sweep(run_dir: str | Path) -> dict[float, StepMetrics]:
    """Collect step-2 metrics of a threshold sweep run, keyed by delta."""
    sweep_dir = Path(run_dir) / "sweep"
    if not sweep_dir.exists():
        return {}
    points: dict[float, StepMetrics] = {}
    for sub in sorted(sweep_dir.glob("delta_*")):
        delta = float(sub.name.split("_", 1)[1])
        path = sub / "metrics" / "step2.json"
        if not path.exists():
            raise ReportError(f"sweep point {sub} has no step2 metrics")
        payload = json.loads(path.read_text(encoding="utf-8"))
        points[delta] = StepMetrics(
            step=payload["step"],
            per_type=payload["per_type"],
            macro_f1=payload["macro_f1"],
        )
    return points


def plot_delta_sweep(out_path: str | Path, points: dict[float, StepMetrics]) -> Path:
    """F1 against the confidence threshold at the second step, one curve per type."""
    if not points:
        raise ReportError("no sweep points to plot")
    deltas = sorted(points)
    type_names = sorted({name for m in points.values() for name in m.per_type})
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in type_names:
        ys = [points[d].per_type.get(name, {}).get("f1", 0.0) for d in deltas]
        ax.plot(deltas, ys, marker="o", label=name)
    ax.plot(deltas, [points[d].macro_f1 for d in deltas], "k--", marker="s", label="macro")
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("step-2 F1")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
