"""Figure rendering for evaluation, benchmark, and training reports.

Every chart writes a PNG and a CSV with the plotted numbers next to it, so
results stay grepable without a display. matplotlib loads lazily with the Agg
backend; nothing here ever opens a window.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .bench import BenchReport
from .metrics import MetricsReport

_BUCKET_ORDER = ["0", "1", "2", "3", ">3"]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def eval_bucket_chart(report: MetricsReport, out_png, out_csv) -> None:
    """Grouped EM/F1 bars per step-count bucket."""
    buckets = [b for b in _BUCKET_ORDER if b in report.per_step_buckets]
    em = [report.per_step_buckets[b].em for b in buckets]
    f1 = [report.per_step_buckets[b].f1 for b in buckets]
    counts = [report.per_step_buckets[b].count for b in buckets]

    _write_csv(out_csv, ["bucket", "count", "em", "f1"],
               [[b, c, e, f] for b, c, e, f in zip(buckets, counts, em, f1)])

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    xs = range(len(buckets))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], em, width, label="EM")
    ax.bar([x + width / 2 for x in xs], f1, width, label="F1")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{b}\n(n={c})" for b, c in zip(buckets, counts)])
    ax.set_xlabel("program steps")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.set_title("Accuracy by step-count bucket")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def bench_length_chart(reports: list[BenchReport], out_png, out_csv) -> None:
    """Mean decode seconds per example as a function of gold program length."""
    lengths = sorted({b.step_count for r in reports for b in r.per_length})
    rows = []
    for length in lengths:
        row: list = [length]
        for report in reports:
            row.append(report.bucket_seconds().get(length))
        rows.append(row)
    _write_csv(out_csv, ["step_count"] + [f"{r.decoder}_seconds" for r in reports], rows)

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for report in reports:
        seconds = report.bucket_seconds()
        xs = [length for length in lengths if length in seconds]
        ys = [seconds[length] for length in xs]
        ax.plot(xs, ys, marker="o", label=report.decoder)
    ax.set_xlabel("gold program steps")
    ax.set_ylabel("decode seconds per example")
    ax.set_title("Decode time vs program length")
    ax.set_ylim(bottom=0)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def training_curve_chart(history: list[dict], out_png, out_csv) -> None:
    """Train loss and dev accuracy curves over epochs."""
    if not history:
        raise ValueError("history is empty")
    header = list(history[0].keys())
    _write_csv(out_csv, header, [[row[k] for k in header] for row in history])

    epochs = [row["epoch"] for row in history]
    plt = _pyplot()
    fig, ax_loss = plt.subplots(figsize=(7, 4.5))
    ax_loss.plot(epochs, [row["train_loss"] for row in history],
                 color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:red")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")
    ax_loss.grid(alpha=0.3)

    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [row["dev_em"] for row in history],
                color="tab:blue", label="dev EM")
    ax_acc.plot(epochs, [row["dev_prog_acc"] for row in history],
                color="tab:green", label="dev Prog Acc")
    ax_acc.set_ylabel("dev score")
    ax_acc.set_ylim(0, 1.05)

    lines, labels = [], []
    for axis in (ax_loss, ax_acc):
        ln, lb = axis.get_legend_handles_labels()
        lines += ln
        labels += lb
    ax_acc.legend(lines, labels, loc="center right")
    ax_loss.set_title("Training curves")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out
