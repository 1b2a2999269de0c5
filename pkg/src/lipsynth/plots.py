"""Matplotlib figures for training logs and evaluation reports (file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .metrics import EvalReport


def loss_curve(history: list[dict], path, title: str = "training loss") -> Path:
    """Per-epoch total loss plus whatever component keys the history carries."""
    if not history:
        raise ValidationError("loss_curve: empty history")
    path = Path(path)
    epochs = [row["epoch"] for row in history]
    skip = {"epoch", "perplexity"}
    keys = [k for k in history[0] if k not in skip]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in keys:
        ax.plot(epochs, [row[key] for row in history], label=key, linewidth=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    if "perplexity" in history[0]:
        ax2 = ax.twinx()
        ax2.plot(epochs, [row["perplexity"] for row in history], color="gray",
                 linestyle="--", linewidth=1.0, alpha=0.7)
        ax2.set_ylabel("codebook perplexity", color="gray")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def report_figures(report: EvalReport, out_dir) -> list[Path]:
    """Per-language metric bars and a per-clip LVE vs WER scatter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = report.aggregates()
    langs = [k for k in agg if k != "overall"]
    written: list[Path] = []

    for metric, label in (("lve_mean", "LVE (rig units)"), ("avlr_wer_mean", "AVLR WER")):
        values = [agg[l][metric] for l in langs]
        if not langs or all(v is None for v in values):
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = np.arange(len(langs))
        ax.bar(xs, [0.0 if v is None else v for v in values], width=0.6, color="#4878d0")
        overall = agg["overall"][metric]
        if overall is not None:
            ax.axhline(overall, color="gray", linestyle="--", linewidth=1.0,
                       label=f"overall {overall:.4g}")
            ax.legend(fontsize=8)
        ax.set_xticks(xs)
        ax.set_xticklabels(langs)
        ax.set_ylabel(label)
        ax.set_title(f"{label} by language")
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        name = "lve_by_language.png" if metric == "lve_mean" else "wer_by_language.png"
        fig.savefig(out_dir / name, dpi=120)
        plt.close(fig)
        written.append(out_dir / name)

    pairs = [(r.lve, r.avlr_wer, r.language) for r in report.rows
             if r.lve is not None and r.avlr_wer is not None]
    if pairs:
        fig, ax = plt.subplots(figsize=(5, 4))
        for lang in sorted({p[2] for p in pairs}):
            xs = [p[0] for p in pairs if p[2] == lang]
            ys = [p[1] for p in pairs if p[2] == lang]
            ax.scatter(xs, ys, s=18, alpha=0.7, label=lang)
        rho = report.spearman_lve_vs_wer()
        title = "per-clip LVE vs AVLR WER"
        if rho is not None:
            title += f" (spearman {rho:.3f})"
        ax.set_xlabel("LVE (rig units)")
        ax.set_ylabel("AVLR WER")
        ax.set_title(title)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_dir / "lve_vs_wer.png", dpi=120)
        plt.close(fig)
        written.append(out_dir / "lve_vs_wer.png")
    return written
