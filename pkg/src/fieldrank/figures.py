"""Matplotlib figures rendered next to the delimited report files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricReport  # noqa: E402


def plot_loss_curve(rows: Sequence[tuple[int, float | None, float | None]],
                    path: str | Path) -> None:
    train = [(s, v) for s, v, _ in rows if v is not None]
    valid = [(s, v) for s, _, v in rows if v is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    if train:
        ax.plot([s for s, _ in train], [v for _, v in train], label="train", lw=1.0)
    if valid:
        ax.plot([s for s, _ in valid], [v for _, v in valid], label="validation",
                marker="o", lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("pairwise loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_learning_curve(rows: Sequence[tuple[int, float]], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="o")
    ax.set_xlabel("training instances seen")
    ax.set_ylabel("NDCG@10")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_report_histogram(report: MetricReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(report.values(10), bins=20, range=(0.0, 1.0), edgecolor="black")
    ax.axvline(report.mean_ndcg_at_10, color="red", lw=1.5,
               label=f"mean {report.mean_ndcg_at_10:.4f}")
    ax.set_xlabel("per-query NDCG@10")
    ax.set_ylabel("queries")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_comparison(label_a: str, report_a: MetricReport,
                    label_b: str, report_b: MetricReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    metrics = ["NDCG@1", "NDCG@10"]
    a_vals = [report_a.mean_ndcg_at_1, report_a.mean_ndcg_at_10]
    b_vals = [report_b.mean_ndcg_at_1, report_b.mean_ndcg_at_10]
    x = range(len(metrics))
    width = 0.35
    ax.bar([i - width / 2 for i in x], a_vals, width, label=label_a)
    ax.bar([i + width / 2 for i in x], b_vals, width, label=label_b)
    ax.set_xticks(list(x))
    ax.set_xticklabels(metrics)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("mean value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
