"""Figure rendering for training logs and evaluation reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(log_path, out_png):
    """Train/validation loss per epoch, one panel per training phase."""
    records = []
    with open(log_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    phases = sorted({r["phase"] for r in records})
    fig, axes = plt.subplots(1, max(1, len(phases)), figsize=(5 * max(1, len(phases)), 4),
                             squeeze=False)
    for ax, phase in zip(axes[0], phases):
        rows = [r for r in records if r["phase"] == phase]
        epochs = [r["epoch"] for r in rows]
        ax.plot(epochs, [r["train_loss"] for r in rows], label="train")
        ax.plot(epochs, [r["val_loss"] for r in rows], label="validation")
        ax.set_title(f"phase {phase}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_ap_report(report_dict, out_png):
    """Bar chart of AP at each IoU threshold, annotated with mean AP and AJI."""
    rows = report_dict["per_threshold"]
    thresholds = [r["t"] for r in rows]
    aps = [r["AP"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([str(t) for t in thresholds], aps, color="#4878d0")
    ax.set_ylim(0, 1)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_title(f"mean AP {report_dict['mean_AP']:.4f}   AJI {report_dict['AJI']:.4f}")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def write_report_csv(report_dict, out_csv):
    """Delimited companion to the JSON report: one row per threshold."""
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "TP", "FP", "FN", "AP"])
        for r in report_dict["per_threshold"]:
            writer.writerow([r["t"], r["TP"], r["FP"], r["FN"], f"{r['AP']:.6f}"])
        writer.writerow(["mean_AP", "", "", "", f"{report_dict['mean_AP']:.6f}"])
        writer.writerow(["AJI", "", "", "", f"{report_dict['AJI']:.6f}"])
    return Path(out_csv)
