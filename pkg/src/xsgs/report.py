"""Report emission: canonical JSON, aligned text tables, CSV, and figures.

Figures are rendered with the Agg backend straight to files, next to the
delimited output, so reports work headless.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _sanitize(obj):
    """Make report objects JSON-safe; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        try:
            obj = obj.item()
        except (TypeError, ValueError):
            obj = list(obj)
            return _sanitize(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_sanitize(obj), sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n")


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        if not math.isfinite(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6g}"
    return str(value)


def format_table(headers: list, rows: list) -> str:
    """Aligned plain-text table; rows are dicts keyed like headers."""
    cells = [[_fmt(row.get(h)) for h in headers] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines) + "\n"


def write_table(path, headers: list, rows: list) -> None:
    Path(path).write_text(format_table(headers, rows))


def write_csv(path, headers: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for row in rows:
            writer.writerow([_fmt(row.get(h)) if row.get(h) is not None else "" for h in headers])


ROBUSTNESS_COLUMNS = [
    "rate",
    "bit_precision",
    "feat_rel_mse",
    "obj_chamfer",
    "sh_psnr_db",
    "mask_precision",
    "mask_recall",
]


def robustness_figure(report_rows: list, path) -> None:
    """Precision and recovery metrics versus pruning rate."""
    rates = [row["rate"] for row in report_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    drew1 = False
    for key, label in (("bit_precision", "bit precision"), ("mask_precision", "mask precision"), ("mask_recall", "mask recall")):
        vals = [row.get(key) for row in report_rows]
        if all(v is not None for v in vals):
            ax1.plot(rates, vals, marker="o", label=label)
            drew1 = True
    ax1.set_xlabel("pruning rate")
    ax1.set_ylabel("fraction")
    ax1.set_ylim(0.0, 1.05)
    ax1.set_title("detection and decoding vs pruning")
    if drew1:
        ax1.legend()
    drew2 = False
    for key, label in (("feat_rel_mse", "feature rel. MSE"), ("obj_chamfer", "object Chamfer")):
        vals = [row.get(key) for row in report_rows]
        if all(v is not None for v in vals):
            ax2.plot(rates, vals, marker="s", label=label)
            drew2 = True
    ax2.set_xlabel("pruning rate")
    ax2.set_yscale("log")
    ax2.set_title("payload recovery error")
    if drew2:
        ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figure(metric_rows: list, path) -> None:
    """Loss components over training steps, log scale."""
    if not metric_rows:
        return
    steps = [row["step"] for row in metric_rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    keys = [k for k in metric_rows[-1] if k not in ("step", "bit_acc", "total", "main_total")]
    for key in keys:
        vals = [row.get(key) for row in metric_rows]
        if all(v is not None for v in vals):
            ax.plot(steps, [max(v, 1e-12) for v in vals], label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss component")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_training_outputs(metric_rows: list, out_dir) -> None:
    """metrics.csv plus the loss-curve figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    headers = sorted({k for row in metric_rows for k in row}, key=lambda k: (k != "step", k))
    write_csv(out / "metrics.csv", headers, metric_rows)
    training_figure(metric_rows, out / "loss_curve.png")


def write_robustness_outputs(report, out_dir) -> None:
    """report.json, an aligned table, report.csv, and the figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report.to_dict())
    headers = [h for h in ROBUSTNESS_COLUMNS if any(h in row for row in report.rows)]
    write_table(out / "report.txt", headers, report.rows)
    write_csv(out / "report.csv", headers, report.rows)
    robustness_figure(report.rows, out / "robustness.png")
