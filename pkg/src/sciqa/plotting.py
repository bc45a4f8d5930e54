"""Static figures for statistics reports and evaluation runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport, HistogramBundle  # noqa: E402

LABELS = {"mu": "mean of distortion feature", "sigma": "std of distortion feature",
          "phi_sum": "summed KL deviation"}


def _stairs(ax, edges, counts, label, color):
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    density = counts / (total * np.diff(edges)) if total else counts
    ax.stairs(density, edges, label=f"{label} (n={int(total)})", color=color, fill=True, alpha=0.45)


def save_histograms(bundle: HistogramBundle, out_dir, fmt: str = "png") -> list[Path]:
    """One pristine-vs-distorted histogram per quantity; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, hist in bundle.histograms.items():
        edges = np.asarray(hist["edges"])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        _stairs(ax, edges, hist["pristine"], "pristine", "tab:blue")
        _stairs(ax, edges, hist["distorted"], "distorted", "tab:red")
        ax.set_xlabel(LABELS.get(name, name))
        ax.set_ylabel("density")
        ax.set_title(f"{bundle.dataset}: {name}")
        ax.legend(frameon=False)
        fig.tight_layout()
        path = out_dir / f"hist_{name}.{fmt}"
        # fixed metadata keeps repeated renders byte-identical
        fig.savefig(path, metadata={"Software": None} if fmt == "png" else None)
        plt.close(fig)
        paths.append(path)
    return paths


def save_scatter(report: EvalReport, path) -> Path:
    """Predicted vs ground-truth scores, one color per distortion type."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for t in dict.fromkeys(p.distortion_type for p in report.predictions):
        pts = [(p.ground_truth, p.predicted) for p in report.predictions if p.distortion_type == t]
        gt, pred = zip(*pts)
        ax.scatter(gt, pred, s=14, label=t)
    ax.set_xlabel("ground truth")
    ax.set_ylabel("predicted")
    srcc = report.overall.get("srcc")
    ax.set_title(report.dataset + (f"  SRCC={srcc:.3f}" if srcc is not None else ""))
    if report.predictions:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path
