"""Figure rendering for report paths; all figures go to files."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_metric_figure(report, path: str | Path) -> Path:
    """Bar chart of per-category slot accuracy with headline scores."""
    cats = [c for c in report.slot_accuracy if c != "overall"]
    values = [report.slot_accuracy[c] for c in cats]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(cats, values, color="#4878a8")
    ax.axhline(report.slot_accuracy.get("overall", 0.0), color="#c44e52",
               linestyle="--", linewidth=1,
               label=f"overall {report.slot_accuracy.get('overall', 0.0):.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("slot accuracy")
    ax.set_title(f"BLEU-4 {report.bleu4:.3f}   CIDEr {report.cider:.2f}   "
                 f"exact {report.exact_match:.3f}   n={report.corpus_size}")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_bench_figures(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """TPS vs k and MAC counts vs K, next to the CSV they summarize."""
    out_dir = Path(out_dir)
    paths = []

    ks = [r["K"] - 2 for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if any(r.get("tps") for r in rows):
        ax.plot(ks, [r["tps"] for r in rows], "o-", color="#4878a8")
    ax.set_xlabel("procedure query set length k")
    ax.set_ylabel("tokens / second")
    ax.set_title("greedy decoding throughput")
    fig.tight_layout()
    p = out_dir / "bench_tps.png"
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    Ks = [r["K"] for r in rows]
    ax.plot(Ks, [r["encoder_macs"] for r in rows], "o-", label="encoder total")
    ax.plot(Ks, [r["enc_score_macs"] for r in rows], "s--",
            label="score/mix (quadratic)")
    ax.plot(Ks, [r["enc_proj_macs"] for r in rows], "^--",
            label="projections (linear)")
    ax.set_xlabel("procedure length K = k + 2")
    ax.set_ylabel("multiply-accumulates")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "bench_ops.png"
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(p)
    return paths


def save_contact_sheet(frames, path: str | Path, labels=None,
                       highlight: set[int] | None = None) -> Path:
    """Side-by-side frame strip; highlighted columns get a colored frame."""
    n = len(frames)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 2.1))
    if n == 1:
        axes = [axes]
    for i, (ax, frame) in enumerate(zip(axes, frames)):
        ax.imshow(np.clip(frame, 0, 1))
        ax.set_xticks([])
        ax.set_yticks([])
        if labels:
            ax.set_title(labels[i], fontsize=8)
        if highlight and i in highlight:
            for spine in ax.spines.values():
                spine.set_edgecolor("#c44e52")
                spine.set_linewidth(3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_loss_curves(log_path: str | Path, out_path: str | Path) -> Path:
    """Loss-vs-step curves from a line-delimited training log."""
    steps, series = [], {}
    for line in Path(log_path).read_text(encoding="utf-8").splitlines():
        entry = json.loads(line)
        if "total" in entry:
            steps.append(entry["step"])
            for key in ("msm", "align", "csy", "total"):
                if key in entry:
                    series.setdefault(key, []).append(entry[key])
        elif "loss" in entry:
            steps.append(entry["step"])
            series.setdefault("loss", []).append(entry["loss"])
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for key, values in series.items():
        ax.plot(steps[:len(values)], values, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)
