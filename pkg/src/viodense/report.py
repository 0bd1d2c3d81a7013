"""Delimited report tables plus rendered figures.

Every report kind writes a CSV next to a PNG figure: per-frame metric
tables, the per-frame affine-drift series, and the sparsity-reduction sweep.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .alignment import DriftSeries
from .metrics import MetricReport

FLOAT_FMT = "%.9g"

METRIC_COLUMNS = ("RMSE", "MAE", "iRMSE", "iMAE", "AbsRel")


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "nan"
    return FLOAT_FMT % value


def write_metrics_report(rows, out_dir, pooled_note: str = "per-frame") -> Path:
    """Metric table (plus a mean row) and an error-over-frames figure.

    ``rows`` is a list of (label, MetricReport) pairs, usually one per frame.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    rows = [(label, rep) for label, rep in rows if rep is not None]
    with open(csv_path, "w") as f:
        f.write("frame," + ",".join(METRIC_COLUMNS) + ",count\n")
        for idx, rep in rows:
            f.write(f"{idx}," + ",".join(_fmt(v) for v in rep.row()) + f",{rep.count}\n")
        if rows:
            mean_vals = np.mean([rep.row() for _, rep in rows], axis=0)
            total = sum(rep.count for _, rep in rows)
            f.write(f"mean ({pooled_note})," + ",".join(_fmt(v) for v in mean_vals) + f",{total}\n")

    fig, ax = plt.subplots(figsize=(7, 3.2))
    if rows:
        ax.plot([i for i, _ in rows], [rep.rmse for _, rep in rows], lw=1.2, label="RMSE [mm]")
        ax.plot([i for i, _ in rows], [rep.mae for _, rep in rows], lw=1.2, label="MAE [mm]")
    ax.set_xlabel("frame")
    ax.set_ylabel("depth error [mm]")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "metrics.png", dpi=130)
    plt.close(fig)
    return csv_path


def write_drift_report(series: DriftSeries, out_dir) -> Path:
    """Per-frame scale/offset series with their variances, as CSV and figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "drift.csv"
    scales = series.scales
    offsets = series.offsets
    with open(csv_path, "w") as f:
        f.write("frame,scale,offset\n")
        for i, (s, b) in enumerate(zip(scales, offsets)):
            f.write(f"{i},{_fmt(s)},{_fmt(b)}\n")
        f.write(f"variance,{_fmt(series.scale_variance)},{_fmt(series.offset_variance)}\n")

    fig, axes = plt.subplots(2, 1, figsize=(7, 4.4), sharex=True)
    frames = np.arange(len(scales))
    axes[0].plot(frames, scales, ".-", ms=3, lw=1.0, color="tab:blue")
    axes[0].set_ylabel("scale")
    axes[0].set_title(
        f"per-frame affine fit  (var scale={series.scale_variance:.3g}, var offset={series.offset_variance:.3g})",
        fontsize=9,
    )
    axes[1].plot(frames, offsets, ".-", ms=3, lw=1.0, color="tab:red")
    axes[1].set_ylabel("offset [1/m]")
    axes[1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(out_dir / "drift.png", dpi=130)
    plt.close(fig)
    return csv_path


def write_sweep_report(rows: dict[int, dict[str, MetricReport]], out_dir) -> Path:
    """Reduction-sweep table: one row per reduction level, GA vs refined columns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    methods = ("ga", "refined")
    with open(csv_path, "w") as f:
        header = ["reduction_pct"]
        for m in methods:
            header += [f"{m}_{c}" for c in METRIC_COLUMNS]
        f.write(",".join(header) + "\n")
        for pct in sorted(rows):
            line = [str(pct)]
            for m in methods:
                rep = rows[pct].get(m)
                line += [_fmt(v) for v in rep.row()] if rep else ["nan"] * len(METRIC_COLUMNS)
            f.write(",".join(line) + "\n")

    fig, ax = plt.subplots(figsize=(6, 3.6))
    pcts = sorted(rows)
    for m, color in zip(methods, ("tab:gray", "tab:green")):
        vals = [rows[p][m].rmse if rows[p].get(m) else np.nan for p in pcts]
        ax.plot(pcts, vals, "o-", color=color, label=m.upper() if m == "ga" else "refined")
    ax.set_xlabel("sparse point reduction [%]")
    ax.set_ylabel("RMSE [mm]")
    ax.set_xticks(pcts)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", dpi=130)
    plt.close(fig)
    return csv_path
